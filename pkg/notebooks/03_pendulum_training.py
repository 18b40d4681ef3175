"""
Short pendulum run with and without alignment
=============================================

A scaled-down training run.  The full comparison lives in
``configs/pendulum_desk.ini`` and takes tens of minutes; this one takes a
couple of minutes and only shows the moving parts.
"""

# %%
import tempfile
from pathlib import Path

from ampo import harness
from ampo.harness import RunConfig

cfg = RunConfig.load(Path(__file__).resolve().parent.parent / "configs" / "pendulum_desk.ini")
cfg = cfg.replace(total_real_steps=3000, seeds=(0,))
print(cfg.to_text())

# %%
out = Path(tempfile.mkdtemp())
ampo = harness.run(cfg, out_path=out / "ampo.csv")
base = harness.run(cfg.replace(adaptation_enabled=False), out_path=out / "baseline.csv")

# %%
print(f"{'step':>6} {'return':>9} {'val loss':>9} {'eps10':>8} {'W1':>8}   | baseline return, val loss, eps10")
for a, b in zip(ampo, base):
    print(f"{a.real_step:6d} {a.episodic_return:9.1f} {a.model_val_loss:9.3f} {a.compounding_error_10:8.4f} "
          f"{a.w1_estimate:8.4f}   | {b.episodic_return:9.1f} {b.model_val_loss:9.3f} {b.compounding_error_10:8.4f}")

# %%
# Sweeping one knob writes a CSV per cell and a manifest next to them.
manifest = harness.sweep(cfg.replace(total_real_steps=500), "G2", [0, 6], out / "sweep")
for cell, path in manifest.items():
    print(cell, "->", path)
