#!/usr/bin/env python3
"""Convert torchvision VGG-19 weights into a styleforge weight archive.

Writes <out>.manifest.json and <out>.bin (little-endian f32, manifest order).

    pip install torch torchvision
    python tools/convert_vgg19.py weights/vgg19
    python tools/convert_vgg19.py weights/vgg19 --state-dict vgg19-dcbb9e9d.pth
"""

import argparse
import json
import sys

import numpy as np

# torchvision `features` indices of the 16 convolutions
CONV_INDICES = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34]
CONV_NAMES = [
    "conv1_1", "conv1_2",
    "conv2_1", "conv2_2",
    "conv3_1", "conv3_2", "conv3_3", "conv3_4",
    "conv4_1", "conv4_2", "conv4_3", "conv4_4",
    "conv5_1", "conv5_2", "conv5_3", "conv5_4",
]


def load_state_dict(path):
    import torch

    if path:
        return torch.load(path, map_location="cpu")
    from torchvision.models import VGG19_Weights, vgg19

    return vgg19(weights=VGG19_Weights.IMAGENET1K_V1).state_dict()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", help="archive base path (without extension)")
    ap.add_argument("--state-dict", help="local .pth file instead of the torchvision download")
    args = ap.parse_args()

    state = load_state_dict(args.state_dict)
    manifest = []
    with open(args.out + ".bin", "wb") as blob:
        for idx, name in zip(CONV_INDICES, CONV_NAMES):
            for part in ("weight", "bias"):
                t = state[f"features.{idx}.{part}"].detach().cpu().numpy().astype("<f4")
                manifest.append({"name": f"{name}.{part}", "shape": list(t.shape), "dtype": "f32"})
                blob.write(np.ascontiguousarray(t).tobytes())
    with open(args.out + ".manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    print(f"wrote {len(manifest)} tensors to {args.out}.bin", file=sys.stderr)


if __name__ == "__main__":
    main()
