"""Convert the DRIVE archive layout into the raw layout read by `tinyunet`.

    python python/convert_drive.py <DRIVE-dir> <out-dir>
    tinyunet preprocess <out-dir> <prepared-dir>

Input: DRIVE/{training,test}/{images,1st_manual,mask}. Output:
images/NN.png, labels/NN.png, masks/NN.png and manifest.txt (21-40 train,
01-20 test).
"""

import argparse
import re
from pathlib import Path

from PIL import Image


def find(folder, ident, suffix):
    hits = sorted(p for p in folder.iterdir() if re.match(rf"{ident}_.*{suffix}$", p.name))
    if not hits:
        raise SystemExit(f"no file for {ident} matching *{suffix} in {folder}")
    return hits[0]


def binary(path):
    return Image.open(path).convert("L").point(lambda v: 255 if v > 127 else 0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("drive", type=Path)
    ap.add_argument("out", type=Path)
    args = ap.parse_args()

    for sub in ("images", "labels", "masks"):
        (args.out / sub).mkdir(parents=True, exist_ok=True)
    split = {"training": [], "test": []}
    for part in split:
        root = args.drive / part
        for img in sorted((root / "images").iterdir()):
            m = re.match(r"(\d+)_", img.name)
            if not m:
                continue
            ident = m.group(1)
            Image.open(img).convert("RGB").save(args.out / "images" / f"{ident}.png")
            binary(find(root / "1st_manual", ident, r"manual1\.gif")).save(args.out / "labels" / f"{ident}.png")
            binary(find(root / "mask", ident, r"mask\.gif")).save(args.out / "masks" / f"{ident}.png")
            split[part].append(ident)
    manifest = f"train = {', '.join(split['training'])}\ntest = {', '.join(split['test'])}\n"
    (args.out / "manifest.txt").write_text(manifest)
    print(f"converted {len(split['training'])} training and {len(split['test'])} test images into {args.out}")


if __name__ == "__main__":
    main()
