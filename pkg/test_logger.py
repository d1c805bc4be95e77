# test_logger.py
import json
import unittest

from exceptions import CheckpointFormatError, DimensionError, MeshRecoveryError, TimestepOutOfRangeError
from logger import StructuredLogger


class TestStructuredLogger(unittest.TestCase):
    def test_emits_json_with_fields(self):
        logger = StructuredLogger("occmesh.test")
        with self.assertLogs("occmesh.test", level="INFO") as captured:
            logger.info("epoch done", epoch=3, loss=0.5)
        record = json.loads(captured.records[0].getMessage())
        self.assertEqual(record["message"], "epoch done")
        self.assertEqual(record["level"], "INFO")
        self.assertEqual((record["epoch"], record["loss"]), (3, 0.5))

    def test_one_handler_per_name(self):
        a = StructuredLogger("occmesh.once")
        StructuredLogger("occmesh.once")
        self.assertEqual(len(a.logger.handlers), 1)


class TestExceptions(unittest.TestCase):
    def test_errors_carry_values(self):
        err = DimensionError((2, 3), (2, 4))
        self.assertIsInstance(err, MeshRecoveryError)
        self.assertEqual(err.expected, (2, 3))
        self.assertIn("(2, 4)", err.message)
        self.assertEqual(TimestepOutOfRangeError(7, 5).message, "Timestep 7 outside [0, 5]")
        self.assertEqual(CheckpointFormatError("a.dpmk").path, "a.dpmk")


if __name__ == "__main__":
    unittest.main()
