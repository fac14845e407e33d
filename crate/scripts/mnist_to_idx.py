#!/usr/bin/env python3
"""Convert the npm `mnist` package digits into IDX files.

Usage: mnist_to_idx.py <package>/src/digits <out_dir> [--train 8000] [--test 2000] [--seed 0]

Each `<d>.json` holds `{"data": [...]}` with 784 floats in [0, 1] per image.
Images are shuffled with a fixed seed and split into train and test sets.
"""

import argparse
import json
import random
import struct
from pathlib import Path

SIDE = 28


def load_digits(src: Path):
    samples = []
    for d in range(10):
        flat = json.loads((src / f"{d}.json").read_text())["data"]
        if len(flat) % (SIDE * SIDE):
            raise SystemExit(f"{d}.json: length {len(flat)} is not a multiple of {SIDE * SIDE}")
        for i in range(0, len(flat), SIDE * SIDE):
            pixels = bytes(max(0, min(255, round(v * 255))) for v in flat[i : i + SIDE * SIDE])
            samples.append((pixels, d))
    return samples


def write_idx(out: Path, stem: str, samples):
    with open(out / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(samples), SIDE, SIDE))
        for pixels, _ in samples:
            f.write(pixels)
    with open(out / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("src", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--train", type=int, default=8000)
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = load_digits(args.src)
    if args.train + args.test > len(samples):
        raise SystemExit(f"only {len(samples)} images available")
    random.Random(args.seed).shuffle(samples)
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out, "train", samples[: args.train])
    write_idx(args.out, "test", samples[args.train : args.train + args.test])
    print(f"wrote {args.train} train / {args.test} test images to {args.out}")


if __name__ == "__main__":
    main()
