"""Compare the four variants (shared multi-type model, one model per product
type, no region fusion, concatenation instead of MAG) on a reduced catalog.

    python3 demos/04_ablation.py [out_dir]
"""
# %%
import logging
import sys
from pathlib import Path

from mxt.pipeline import ablation_markdown, run_ablation
from mxt.synth import CatalogSpec, generate
from mxt.training import TrainConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_ablation")
generate(CatalogSpec(sizes={"train": 300, "val": 100, "test": 100}, seed=5), out / "data")

# %% each variant is trained from scratch and scored on the same test split
rows = run_ablation(out / "data", out, TrainConfig())
print(ablation_markdown(rows))
print("full reports in", out / "ablation.json")
