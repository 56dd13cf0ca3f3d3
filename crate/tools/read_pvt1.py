#!/usr/bin/env python3
"""Reference reader for PVT1 tensor files, independent of the Rust code.

Prints the shape on one line, then every value in row-major order using
repr-exact formatting. Usage: read_pvt1.py FILE
"""
import struct
import sys


def read_pvt1(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != b"PVT1":
        raise ValueError("bad magic")
    dtype, rank = blob[4], blob[5]
    fmt, width = {0: ("f", 4), 1: ("d", 8)}[dtype]
    shape = struct.unpack_from("<%dI" % rank, blob, 6)
    off = 6 + 4 * rank
    n = 1
    for d in shape:
        n *= d
    if len(blob) != off + n * width:
        raise ValueError("payload size mismatch")
    values = struct.unpack_from("<%d%s" % (n, fmt), blob, off)
    return shape, values


def main():
    shape, values = read_pvt1(sys.argv[1])
    print("shape", *shape)
    for v in values:
        print(repr(v))


if __name__ == "__main__":
    main()
