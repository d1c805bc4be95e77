# utils.py

import json
import os
import random
import hashlib

import numpy as np
import torch
from tenacity import retry, stop_after_attempt, wait_exponential, retry_if_exception_type

from logger import StructuredLogger
from config import MAX_RETRIES, RETRY_DELAY

logger = StructuredLogger(__name__)


@retry(
    stop=stop_after_attempt(MAX_RETRIES),
    wait=wait_exponential(multiplier=RETRY_DELAY, min=RETRY_DELAY, max=10),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def write_bytes_atomic(path, payload: bytes):
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(payload)
    os.replace(tmp_path, path)


def save_to_json(data, filename):
    try:
        payload = json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True)
        write_bytes_atomic(filename, payload.encode("utf-8"))
        logger.info(f"Saved JSON to {filename}")
    except Exception as e:
        logger.error(f"Failed to save JSON to {filename}: {str(e)}", exception=str(e))
        raise


def append_jsonl(record, filename):
    try:
        with open(filename, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    except Exception as e:
        logger.error(f"Failed to append record to {filename}: {str(e)}", exception=str(e))
        raise


def write_jsonl(records, filename):
    lines = [json.dumps(r, sort_keys=True) for r in records]
    write_bytes_atomic(filename, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def load_json(filename):
    with open(filename, "r", encoding="utf-8") as f:
        return json.load(f)


def ensure_directory_exists(directory):
    if not os.path.exists(directory):
        try:
            os.makedirs(directory, exist_ok=True)
            logger.info(f"Created directory: {directory}")
        except Exception as e:
            logger.error(
                f"Failed to create directory {directory}: {str(e)}",
                exception=str(e),
                directory=directory,
            )
            raise


def content_hash(paths):
    """SHA-256 over the bytes of every file under the given paths, in sorted order."""
    digest = hashlib.sha256()
    files = []
    for path in paths:
        if path is None:
            continue
        if os.path.isdir(path):
            for root, _, names in os.walk(path):
                files.extend(os.path.join(root, n) for n in names)
        elif os.path.exists(path):
            files.append(path)
    for name in sorted(files):
        digest.update(os.path.relpath(name).encode("utf-8"))
        with open(name, "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()


def derive_seed(seed, index):
    raw = hashlib.sha256(f"{seed}:{index}".encode("utf-8")).digest()
    return int.from_bytes(raw[:8], "little") & 0x7FFFFFFFFFFFFFFF


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def make_generator(seed):
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen
