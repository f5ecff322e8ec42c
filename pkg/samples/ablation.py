"""
Train a small denoiser, then compare guided and unguided sampling on
occluded queries with the same checkpoint and seeds.

    python samples/ablation.py WORKDIR [n_train] [n_test]
"""
import logging
import sys
from pathlib import Path

from axisforge import load_config
from axisforge.dataset import cmd_render_dataset
from axisforge.pipeline import cmd_ablation, cmd_train

logging.basicConfig(level=logging.INFO)

root = Path(sys.argv[1])
n_train = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
n_test = int(sys.argv[3]) if len(sys.argv) > 3 else 100

config = load_config(Path(__file__).parent / "configs" / "default.json")

cmd_render_dataset(config, n_train, n_test, root / "dataset")
summary = cmd_train(config, root / "dataset", root / "run", progress=True)

result = cmd_ablation(config, root / "dataset", root / "ablation",
                      checkpoint=summary["checkpoint"])
print(f"reproj rate guided {result['guided_reproj_rate']:.3f}, "
      f"unguided {result['unguided_reproj_rate']:.3f}, gain {result['gain_pp']:.1f} pp")
print(f"paired delta: {result['delta']}")
sys.exit(0 if result["passed"] else 1)
