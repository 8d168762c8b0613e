"""Render a small defect set, overfit the default model to it, and score it.

Run: python demos/03_overfit_and_evaluate.py [--steps N] [--out DIR]
Takes a couple of minutes on one core at the default 150 steps.
"""
import argparse
from pathlib import Path

from deformdet.config import TrainConfig
from deformdet.synth import GenSpec, generate_dataset, load_dataset
from deformdet.train import Trainer, evaluate_model

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=150)
parser.add_argument("--out", default="demo_run")
args = parser.parse_args()
out = Path(args.out)

spec = GenSpec(class_weights=(0, 0, 0, 0, 0, 1.0), min_defects=1, max_defects=2, seed=7,
               train_frac=1.0, val_frac=0.0)
counts = generate_dataset(spec, out / "data", 20)
print("rendered 20 pages:", {k: v for k, v in counts.items() if v})
data = load_dataset(out / "data", "train")

trainer = Trainer(TrainConfig(steps=args.steps, out=str(out / "run")), data)
for _ in range(args.steps):
    total, cls, box = trainer.step()
    if trainer.step_count % 25 == 0:
        rep = evaluate_model(trainer.model, data)
        print(f"step {trainer.step_count:4d}  loss {total:.4f} (cls {cls:.4f}, box {box:.4f})"
              f"  mAP@50 {rep.map50:.3f}")
trainer.save(out / "run" / "checkpoint")

rep = evaluate_model(trainer.model, data)
print()
print(rep.table(), end="")
rep.write_pr_csv(out / "pr.csv")
print(f"checkpoint in {out / 'run' / 'checkpoint'}, PR points in {out / 'pr.csv'}")
