"""
Render a small benchmark, sample every test record with the analytic
Gaussian denoiser, solve the poses and score them.
"""
import logging
import sys
import tempfile
from pathlib import Path

from axisforge import load_config
from axisforge.dataset import cmd_render_dataset
from axisforge.pipeline import cmd_infer, cmd_eval

logging.basicConfig(level=logging.INFO)

profile = Path(__file__).parent / "configs" / "default.json"
config = load_config(profile, ["seeds.seed=3", "render.occlusion_frac=0.0"])

root = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="axisforge-"))
cmd_render_dataset(config, n_train=1, n_test=20, out_dir=root / "dataset")
cmd_infer(config, root / "dataset", root / "analytic", analytic=True)
result = cmd_eval(config, root / "analytic", root / "dataset", root / "report")

for key, value in result["summary"].items():
    print(f"{key:>18}: {value}")
