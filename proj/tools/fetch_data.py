#!/usr/bin/env python3
"""Fetch the MNIST / Fashion-MNIST images from their npm data packages
and write them as IDX ubyte files for the benchmark CLI.

The `mnist-data` package ships the original MNIST IDX files (60000
train / 10000 test); they are copied through unchanged. `fashion-mnist`
ships 7000 JSON-encoded images per class, split 6000/1000 per class
(60000/10000) to match the original dataset sizes.

Usage:
    python3 tools/fetch_data.py [--out DIR] [--modules-dir NODE_MODULES]

Without --modules-dir the packages are npm-installed into a temporary
prefix. Output files: <out>/{mnist,fmnist}_{train,test}_{images,labels}.idx
"""

import argparse
import json
import os
import shutil
import struct
import subprocess
import sys
import tempfile

IMG_PIXELS = 28 * 28


def write_idx(images_path, labels_path, images, labels):
    """images: list of bytes(784); labels: list of int."""
    n = len(labels)
    assert len(images) == n
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", 0x803, n, 28, 28))
        for img in images:
            assert len(img) == IMG_PIXELS
            f.write(img)
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", 0x801, n))
        f.write(bytes(labels))


def to_u8(values):
    return bytes(min(255, max(0, round(v * 255))) for v in values)


def load_class_images(path, flat):
    with open(path) as f:
        data = json.load(f)["data"]
    if flat:
        n = len(data) // IMG_PIXELS
        return [to_u8(data[i * IMG_PIXELS:(i + 1) * IMG_PIXELS]) for i in range(n)]
    # some packages contain stray empty/short entries; drop them
    return [to_u8(img) for img in data if len(img) == IMG_PIXELS]


def convert(src_dir, out_dir, base, flat, max_train, max_test):
    """Per class: last 20% (capped at max_test) is test, the rest
    (capped at max_train) is train. Class sizes in the packages vary
    slightly, so the caps are upper bounds, not exact counts."""
    splits = []  # (train imgs, test imgs) per class
    for cls in range(10):
        imgs = load_class_images(os.path.join(src_dir, f"{cls}.json"), flat)
        n_test = min(max_test, len(imgs) // 5)
        n_train = min(max_train, len(imgs) - n_test)
        if n_train == 0 or n_test == 0:
            sys.exit(f"{base}: class {cls} has only {len(imgs)} images")
        splits.append((imgs[:n_train], imgs[len(imgs) - n_test:]))

    # interleave classes so any prefix of the file is label-balanced
    def interleave(part):
        imgs, lbls = [], []
        for i in range(max(len(splits[c][part]) for c in range(10))):
            for cls in range(10):
                if i < len(splits[cls][part]):
                    imgs.append(splits[cls][part][i])
                    lbls.append(cls)
        return imgs, lbls

    train_imgs, train_lbls = interleave(0)
    test_imgs, test_lbls = interleave(1)

    write_idx(os.path.join(out_dir, f"{base}_train_images.idx"),
              os.path.join(out_dir, f"{base}_train_labels.idx"),
              train_imgs, train_lbls)
    write_idx(os.path.join(out_dir, f"{base}_test_images.idx"),
              os.path.join(out_dir, f"{base}_test_labels.idx"),
              test_imgs, test_lbls)
    print(f"{base}: {len(train_lbls)} train / {len(test_lbls)} test -> {out_dir}")


def copy_idx(src_dir, out_dir, base):
    """Pass the original IDX files through, checking their headers."""
    names = {
        f"{base}_train_images.idx": ("train-images-idx3-ubyte", 0x803),
        f"{base}_train_labels.idx": ("train-labels-idx1-ubyte", 0x801),
        f"{base}_test_images.idx": ("t10k-images-idx3-ubyte", 0x803),
        f"{base}_test_labels.idx": ("t10k-labels-idx1-ubyte", 0x801),
    }
    counts = []
    for dst, (src, magic) in names.items():
        path = os.path.join(src_dir, src)
        with open(path, "rb") as f:
            got_magic, n = struct.unpack(">ii", f.read(8))
        if got_magic != magic:
            sys.exit(f"{path}: bad magic {got_magic:#x}, expected {magic:#x}")
        counts.append(n)
        shutil.copyfile(path, os.path.join(out_dir, dst))
    print(f"{base}: {counts[0]} train / {counts[2]} test -> {out_dir}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=os.environ.get("XILBENCH_DATA", "data"))
    parser.add_argument("--modules-dir", default=None,
                        help="existing node_modules with mnist + fashion-mnist")
    args = parser.parse_args()
    os.makedirs(args.out, exist_ok=True)

    modules = args.modules_dir
    tmp = None
    if modules is None:
        tmp = tempfile.TemporaryDirectory(prefix="xilbench_npm_")
        subprocess.run(["npm", "install", "--prefix", tmp.name, "--no-save",
                        "mnist-data", "fashion-mnist"], check=True)
        modules = os.path.join(tmp.name, "node_modules")

    copy_idx(os.path.join(modules, "mnist-data", "data"), args.out, "mnist")
    convert(os.path.join(modules, "fashion-mnist", "src", "clothes"),
            args.out, "fmnist", flat=False, max_train=6000, max_test=1000)


if __name__ == "__main__":
    main()
