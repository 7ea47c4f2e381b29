import hashlib


def derive_seed(seed, *keys):
    """Stable 63-bit sub-seed from a root seed and string keys.

    Independent of PYTHONHASHSEED and of the order clips are processed in.
    """
    text = "\x1f".join([str(int(seed)), *map(str, keys)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
