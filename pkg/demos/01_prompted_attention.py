"""Prefix prompts in attention, on numbers small enough to check by hand.

Run: python demos/01_prompted_attention.py
"""
import torch

from incprompt import attention, divide, prompted_attention

torch.set_printoptions(precision=4)

# One query, one key/value, one prompt pair. Both logits are 1/sqrt(2),
# so the softmax splits 50/50 between the token's value and the prompt's.
e1, e2 = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])
out, weights = prompted_attention(e1, e1, e1, e1, e2, return_weights=True)
print("weights over [prompt, token]:", weights)
print("output:", out)

# An empty prompt leaves attention untouched.
g = torch.Generator().manual_seed(0)
q, k, v = (torch.randn(4, 8, generator=g) for _ in range(3))
empty = torch.zeros(0, 8)
diff = (prompted_attention(q, k, v, empty, empty) - attention(q, k, v)).abs().max()
print("L_p = 0, max difference from plain attention:", diff.item())

# A generated prompt tensor is [layers, 2, L_p, D]; divide() splits the key
# half from the value half.
P = torch.randn(3, 2, 5, 8, generator=g)
P_k, P_v = divide(P)
print("prompt", tuple(P.shape), "-> P_k", tuple(P_k.shape), "P_v", tuple(P_v.shape))
