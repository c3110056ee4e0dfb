"""Run a small baseline vs CutMix pipeline and print its report.

    python3 demos/quickstart_pipeline.py [OUTPUT_DIR]
"""

import sys
import tempfile

from xaiport.coordination import run_pipeline, validate_config
from xaiport.evaluation import MetricReport
from xaiport.telemetry import STAGE_LABELS, render_stage_line

config = {
    "dataset": {"kind": "synthetic_bars", "n": 120, "seed": 0},
    "variants": [{"name": "baseline"}, {"name": "cutmix"}],
    "backends": [{"id": "local", "kind": "local"}],
    "methods": ["grad_cam", "grad_cam_pp", "eigen_cam", "layer_cam", "xgrad_cam"],
    "seed": 0,
}

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="xaiport-demo-")
job = run_pipeline(validate_config(config), out)
print(f"job {job.job_id}: {job.state}  ->  {job.directory}")

print("\nstability (lower is steadier), F1 first:")
print(MetricReport.from_dict(job.report()).render_table())

print()
for name, row in job.telemetry.items():
    if name in STAGE_LABELS:
        print(f"{render_stage_line(STAGE_LABELS[name], row['mean_s'], row['std_s'])}  n={row['count']}")
for name, row in job.telemetry.items():
    if "fraction" in row:
        print(f"  {name:<18} {100 * row['fraction']:5.1f}% of stage time")
