# %% [markdown]
# A complete epsilon sweep
#
# ``sweep`` trains the baseline once, then for every budget fine-tunes,
# measures accuracy over several noise draws and attacks a fixed set of test
# images.  Everything lands under one output directory, and any cell can be
# rerun on its own with identical results.

# %%
from pathlib import Path

from splitdp import AttackConfig, DatasetSpec, ExperimentConfig, TrainConfig, sweep
from splitdp.harness import format_pivot
from splitdp.splitnet import ArchitectureSpec

out = Path("sweep_demo")
config = ExperimentConfig(
    dataset=DatasetSpec("synthetic", train_size=2000, test_size=300, seed=0),
    case=1,
    epsilon_grid=(0.5, 5.0, 50.0, 500.0),
    runs=3,
    attack_sample_size=8,
    attack=AttackConfig(max_iters=200, step_size=1000.0, tv_weight=0.0),
    train=TrainConfig(learning_rate=2e-3, batch_size=64, epochs=6),
    finetune=TrainConfig(learning_rate=1e-3, batch_size=64, epochs=2),
    architecture=ArchitectureSpec.from_widths((8, 8, 16, 16, 32, 32)),
    output_dir=str(out), data_root=str(out / "data"),
)
records = sweep(config)

# %%
print(format_pivot(records, "synthetic", 1))
print()
print((out / "results.csv").read_text())
print("grids:", sorted(p.name for p in (out / "grids").iterdir()))
