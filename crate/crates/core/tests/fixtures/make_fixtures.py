"""Writes tiny IDX and CIFAR binary fixtures with struct, independently of the Rust readers.

Pixel (i, r, c) of image i is (i * 31 + r * 7 + c * 3) % 256; label i is (3 * i + 1) % 10.
"""
import os
import struct

HERE = os.path.dirname(os.path.abspath(__file__))


def pixel(i, r, c):
    return (i * 31 + r * 7 + c * 3) % 256


def label(i):
    return (3 * i + 1) % 10


def write_idx(dirname, stem, count):
    os.makedirs(dirname, exist_ok=True)
    with open(os.path.join(dirname, f"{stem}-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x803, count, 28, 28))
        f.write(bytes(pixel(i, r, c) for i in range(count) for r in range(28) for c in range(28)))
    with open(os.path.join(dirname, f"{stem}-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x801, count))
        f.write(bytes(label(i) for i in range(count)))


def write_cifar(dirname):
    os.makedirs(dirname, exist_ok=True)
    names = [f"data_batch_{k}.bin" for k in range(1, 6)] + ["test_batch.bin"]
    for b, name in enumerate(names):
        with open(os.path.join(dirname, name), "wb") as f:
            for j in range(2):
                i = 2 * b + j
                f.write(bytes([label(i)]))
                f.write(bytes((pixel(i, r, c) + ch) % 256 for ch in range(3) for r in range(32) for c in range(32)))


root = os.path.join(HERE, "data")
write_idx(os.path.join(root, "mnist"), "train", 5)
write_idx(os.path.join(root, "mnist"), "t10k", 3)
write_cifar(os.path.join(root, "cifar-10-batches-bin"))
