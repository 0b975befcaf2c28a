"""Sweep prompt length through the experiment harness and plot it.

Equivalent to
    incprompt sweep configs/synthetic.toml --axis prompt_length --values 0,2,4,8,16
Writes runs/demo/sweep_prompt_length/{sweep.csv,sweep_prompt_length.png}.

Run: python demos/04_prompt_length.py   (about 40 s)
"""
from pathlib import Path

from incprompt.config import load_config
from incprompt.experiment import run_sweep

root = Path(__file__).resolve().parents[1]
cfg = load_config(root / "configs" / "synthetic.toml", output_dir=str(root / "runs" / "demo"))
for length, acc, forgetting, _ in run_sweep(cfg, "prompt_length", [0, 2, 4, 8, 16]):
    print(f"L_p={length:<3d} avg_acc={acc:.3f} forgetting={forgetting:.3f}")
print("outputs in", Path(cfg.output_dir) / "sweep_prompt_length")
