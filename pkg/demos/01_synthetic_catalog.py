"""Walk through the synthetic catalog: what a product looks like, which
attributes the text mentions, and which ones only the image carries.

    python3 demos/01_synthetic_catalog.py [out_dir]
"""
# %%
import sys
from collections import Counter
from pathlib import Path

from mxt.synth import CatalogSpec, decode_image, generate

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_catalog")
spec = CatalogSpec(sizes={"train": 200, "val": 50, "test": 100}, seed=0)
cat = generate(spec, out)
print({k: len(v) for k, v in cat.splits.items()}, "records written to", out)

# %% one product, one record per attribute
first = cat.products["train"][0]
print(first.id, first.product_type, first.gold)
for r in cat.splits["train"]:
    if r["id"].startswith(first.id + "/"):
        print(f"  {r['attribute']:12s} value={r['value']!r:14s} in text: {r['value_in_text']}")
print("text:", cat.splits["train"][0]["text"])

# %% the image encodes color, sleeves and length; a pixel reader recovers them
print("decoded from pixels:", decode_image(cat.images[first.id]))

# %% item length never appears in text, so the model has to read it off the image
mentioned = Counter((r["attribute"], r["value_in_text"]) for r in cat.splits["train"])
for (attr, flag), n in sorted(mentioned.items()):
    print(f"{attr:12s} in_text={flag!s:5s} {n}")

# %% zero-shot triples never appear as training labels but do appear in test
for triple in spec.zero_shot_holdout:
    n = sum((r["product_type"], r["attribute"], r["value"]) == triple for r in cat.splits["test"])
    print("holdout", triple, "test records:", n)
