"""
End-to-end command line run
===========================

Drive the ``modalsurv`` commands from Python: write a synthetic cohort to
disk, preprocess it, train the cross-validated bundle, predict and score.
The same steps run from a shell as ``modalsurv synth run.ini`` and so on.
"""

import tempfile
from pathlib import Path

from modalsurv.cli import main

work = Path(tempfile.mkdtemp(prefix="modalsurv_demo_"))
config = work / "run.ini"
config.write_text("""
[paths]
labels = data/labels.csv
clinical_raw = data/clinical
output = out

[features]
wsi = data/wsi.csv
mri = data/mri.csv

[run]
profile = task1
k = 5
seeds = 1
subsets = clinical; wsi

[synth]
n = 200
seed = 5
output = data
""")

# predict scores the training patients themselves, so the eval C-index is optimistic;
# the cross-validated numbers are in results.csv
for command in ("synth", "prep", "train", "predict", "eval"):
    print(f"$ modalsurv {command} run.ini")
    assert main([command, str(config)]) == 0

print((work / "out" / "bundle" / "results.csv").read_text())
print("bundle files:", sorted(p.name for p in (work / "out" / "bundle").iterdir()))
