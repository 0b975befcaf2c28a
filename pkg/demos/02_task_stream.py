"""Build a disjoint-class task stream and walk it the way a learner must.

Run: python demos/02_task_stream.py
"""
from incprompt import ProtocolError, synthetic_gaussian_tasks

stream = synthetic_gaussian_tasks(num_tasks=5, classes_per_task=2, separation=10.0, seed=0)
for t in range(stream.num_tasks):
    x, y = stream.test_split(t)
    print(f"task {t}: head classes {stream.classes(t)}, source {stream.task(t).source_classes}, "
          f"test images {tuple(x.shape)}")

# Training data comes through a cursor that only moves forward.
cursor = stream.cursor()
x0, _ = cursor.train_data(0)
cursor.finish(0)
try:
    cursor.train_data(0)
except ProtocolError as exc:
    print("revisiting task 0 is refused:", exc)
x1, _ = cursor.train_data(1)
print("task 1 training batch:", tuple(x1.shape))
