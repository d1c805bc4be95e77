# test_utils.py
import os
import tempfile
import unittest
from unittest.mock import patch

import torch

from utils import content_hash, derive_seed, load_json, make_generator, save_to_json, write_bytes_atomic


class TestUtils(unittest.TestCase):
    def test_derive_seed(self):
        self.assertEqual(derive_seed(3, 7), derive_seed(3, 7))
        self.assertNotEqual(derive_seed(3, 7), derive_seed(3, 8))
        self.assertNotEqual(derive_seed(3, 7), derive_seed(4, 7))
        self.assertLess(derive_seed(0, "train"), 2**63)

    def test_make_generator(self):
        a = torch.rand(4, generator=make_generator(11))
        b = torch.rand(4, generator=make_generator(11))
        self.assertTrue(torch.equal(a, b))

    def test_json_roundtrip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "out.json")
            save_to_json({"b": 1, "a": [1.5, None]}, path)
            self.assertEqual(load_json(path), {"a": [1.5, None], "b": 1})
            self.assertFalse(os.path.exists(path + ".tmp"))

    def test_content_hash_tracks_bytes(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "blob.bin")
            write_bytes_atomic(path, b"abc")
            first = content_hash([tmp, None])
            self.assertEqual(first, content_hash([tmp]))
            write_bytes_atomic(path, b"abd")
            self.assertNotEqual(first, content_hash([tmp]))

    def test_atomic_write_retries_transient_errors(self):
        real_replace = os.replace
        calls = []

        def flaky(src, dst):
            calls.append(dst)
            if len(calls) == 1:
                raise OSError("busy")
            return real_replace(src, dst)

        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "data.bin")
            with patch("utils.os.replace", side_effect=flaky), patch("time.sleep"):
                write_bytes_atomic(path, b"payload")
            with open(path, "rb") as f:
                self.assertEqual(f.read(), b"payload")
        self.assertEqual(len(calls), 2)


if __name__ == "__main__":
    unittest.main()
