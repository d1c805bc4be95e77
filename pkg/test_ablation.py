# test_ablation.py
import os
import tempfile
import unittest

from ablation import _cell_key, _compare, _median_spread, directional_checks, format_table, run_ablation
from config import tiny_config
from utils import load_json


def cell(mode, nkr, init, mpjpe, occluded=None):
    occluded = occluded if occluded is not None else mpjpe
    return {
        "condition_mode": mode,
        "nkr": nkr,
        "backbone": init,
        "lora_rank": 4,
        "parameters": {"trainable": 10, "total": 100},
        "per_seed": {"seed": list(range(len(mpjpe))), "mpjpe": mpjpe, "occluded_mpjpe": occluded},
        "mpjpe": _median_spread(mpjpe),
        "occluded_mpjpe": _median_spread(occluded),
    }


def grid(cells):
    return {_cell_key(c["condition_mode"], c["nkr"], c["backbone"], c["lora_rank"]): c for c in cells}


class TestAggregation(unittest.TestCase):
    def test_median_spread(self):
        self.assertEqual(_median_spread([3.0, None, 1.0, 2.0]), {"median": 2.0, "min": 1.0, "max": 3.0})
        self.assertEqual(_median_spread([None]), {"median": None, "min": None, "max": None})

    def test_cell_key(self):
        self.assertEqual(_cell_key("z0+cj", False, "random_init", 8), "z0+cj|nkr=off|random_init|r=8")

    def test_compare_signs(self):
        cells = grid(
            [
                cell("z0+cj+ct", True, "diffusion_pretrained", [1.0, 2.0, 3.0]),
                cell("z0+cj", True, "diffusion_pretrained", [2.0, 1.5, 4.0]),
            ]
        )
        result = _compare(
            cells,
            _cell_key("z0+cj+ct", True, "diffusion_pretrained", 4),
            _cell_key("z0+cj", True, "diffusion_pretrained", 4),
            "mpjpe",
        )
        self.assertTrue(result["holds_on_median"])
        self.assertEqual(result["per_seed"], [True, False, True])
        self.assertFalse(result["reversed_in_all_seeds"])

    def test_reversal_in_every_seed(self):
        cells = grid(
            [
                cell("z0+cj+ct", True, "diffusion_pretrained", [1.0, 1.0], occluded=[3.0, 4.0]),
                cell("z0+cj+ct", False, "diffusion_pretrained", [1.0, 1.0], occluded=[2.0, 2.5]),
            ]
        )
        checks = directional_checks(cells, 4)
        self.assertTrue(checks["nkr_on_vs_off"]["reversed_in_all_seeds"])
        self.assertFalse(checks["condition_cj_vs_z0"]["available"])

    def test_table_lists_every_cell(self):
        cells = grid([cell("z0", True, "random_init", [0.5]), cell("z0", False, "random_init", [None])])
        table = format_table(cells).splitlines()
        self.assertEqual(len(table), 4)
        self.assertIn("0.5000 [0.5000, 0.5000]", table[2])
        self.assertIn("n/a", table[3])


class TestRunAblation(unittest.TestCase):
    def test_small_grid(self):
        config = tiny_config()
        config = config.model_copy(
            update={
                "ablation": config.ablation.model_copy(
                    update={"condition_modes": ["z0+cj+ct"], "backbones": ["diffusion_pretrained"], "seeds": [0]}
                )
            }
        )
        with tempfile.TemporaryDirectory() as tmp:
            result = run_ablation(config, tmp)
            self.assertTrue(os.path.exists(os.path.join(tmp, "ablation.txt")))
            saved = load_json(os.path.join(tmp, "ablation.json"))
        self.assertEqual(len(result["cells"]), 2)
        self.assertEqual(set(saved["cells"]), set(result["cells"]))
        self.assertTrue(result["checks"]["4"]["nkr_on_vs_off"]["available"])
        self.assertIn("4", result["attention_probe"])


if __name__ == "__main__":
    unittest.main()
