"""End-to-end command-line workflow.

Writes a synthetic dataset, trains from a preset config, then reloads the
model to evaluate, recommend and export item embeddings.  Everything lands
in a temporary directory unless a path is given.
"""
import sys
import tempfile
from pathlib import Path

from gmlfm.cli import main
from gmlfm.synthetic import make_implicit, write_synthetic

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
root.mkdir(parents=True, exist_ok=True)
preset = Path(__file__).resolve().parents[1] / "configs" / "ablation" / "dnn2-w.conf"

data = root / "synthetic.tsv"
write_synthetic(data, make_implicit(n_users=300, n_items=200, seed=0))
print("data:", data)

run = root / "dnn2-w"
steps = [
    ["train", "--config", str(preset), "--data", str(data), "--output-dir", str(run), "--epochs", "5"],
    ["evaluate", str(run / "model.bin")],
    ["recommend", str(run / "model.bin"), "--user", "0", "--top-k", "5"],
    ["export-embeddings", str(run / "model.bin"), "--field", "item", "--output", str(root / "items.tsv")],
]
for argv in steps:
    print("$ gmlfm", " ".join(argv))
    code = main(argv)
    if code:
        sys.exit(code)

print((run / "metrics.txt").read_text())
print("embeddings:", (root / "items.tsv").read_text().splitlines()[1])
