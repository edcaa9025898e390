#!/usr/bin/env python3
"""Regenerate the shipped layer tables from public architecture shapes.

Branchy networks are flattened into a serialized layer list. Batch-norm
parameters are not modeled. Run from anywhere:

    python3 profiles/generate_profiles.py
"""

import json
import os

HERE = os.path.dirname(os.path.abspath(__file__))


class Builder:
    def __init__(self, name, minibatch):
        self.name = name
        self.minibatch = minibatch
        self.layers = []

    def _push(self, name, kind, c, k, oh, ow, kh, kw, stride, bias):
        if kind == "Conv":
            params = c * k * kh * kw + (k if bias else 0)
            flops = 2 * c * k * kh * kw * oh * ow
        elif kind == "FullyConnected":
            params = c * k + (k if bias else 0)
            flops = 2 * c * k
        else:
            params = 0
            flops = k * oh * ow * kh * kw
        self.layers.append(
            {
                "id": len(self.layers),
                "name": name,
                "kind": kind,
                "C": c,
                "K": k,
                "OH": oh,
                "OW": ow,
                "KH": kh,
                "KW": kw,
                "stride": stride,
                "has_bias": bias,
                "param_count": params,
                "fwd_flops_per_sample": flops,
            }
        )

    def conv(self, name, c, k, out, kernel, stride=1, bias=False):
        self._push(name, "Conv", c, k, out, out, kernel, kernel, stride, bias)

    def fc(self, name, c, k, bias=True):
        self._push(name, "FullyConnected", c, k, 1, 1, 1, 1, 1, bias)

    def pool(self, name, channels, out, kernel, stride):
        self._push(name, "NonParam", channels, channels, out, out, kernel, kernel, stride, False)

    def write(self, filename):
        doc = {"name": self.name, "default_minibatch": self.minibatch, "layers": self.layers}
        with open(os.path.join(HERE, filename), "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1)
            f.write("\n")


def resnet50():
    b = Builder("resnet50", 32)
    b.conv("conv1", 3, 64, 112, 7, stride=2)
    b.pool("pool1", 64, 56, 3, 2)
    in_ch = 64
    stages = [(3, 64, 256, 56), (4, 128, 512, 28), (6, 256, 1024, 14), (3, 512, 2048, 7)]
    for s, (blocks, mid, out, size) in enumerate(stages, start=1):
        for i in range(blocks):
            first = i == 0
            stride = 2 if first and s > 1 else 1
            p = f"layer{s}.{i}"
            b.conv(f"{p}.conv1", in_ch, mid, size, 1)
            b.conv(f"{p}.conv2", mid, mid, size, 3, stride=stride)
            b.conv(f"{p}.conv3", mid, out, size, 1)
            if first:
                b.conv(f"{p}.downsample", in_ch, out, size, 1, stride=stride)
            b.pool(f"{p}.add_relu", out, size, 1, 1)
            in_ch = out
    b.pool("avgpool", 2048, 1, 7, 1)
    b.fc("fc", 2048, 1000)
    b.write("resnet50.json")


def vgg16():
    b = Builder("vgg16", 32)
    cfg = [(224, [64, 64]), (112, [128, 128]), (56, [256, 256, 256]), (28, [512, 512, 512]), (14, [512, 512, 512])]
    c = 3
    for block, (size, widths) in enumerate(cfg, start=1):
        for j, k in enumerate(widths, start=1):
            b.conv(f"conv{block}_{j}", c, k, size, 3, bias=True)
            c = k
        b.pool(f"pool{block}", c, size // 2, 2, 2)
    b.fc("fc6", 512 * 7 * 7, 4096)
    b.fc("fc7", 4096, 4096)
    b.fc("fc8", 4096, 1000)
    b.write("vgg16.json")


def googlenet():
    b = Builder("googlenet", 32)
    b.conv("conv1", 3, 64, 112, 7, stride=2, bias=True)
    b.pool("pool1", 64, 56, 3, 2)
    b.conv("conv2_reduce", 64, 64, 56, 1, bias=True)
    b.conv("conv2", 64, 192, 56, 3, bias=True)
    b.pool("pool2", 192, 28, 3, 2)
    table = [
        ("3a", 28, 192, 64, 96, 128, 16, 32, 32),
        ("3b", 28, 256, 128, 128, 192, 32, 96, 64),
        None,
        ("4a", 14, 480, 192, 96, 208, 16, 48, 64),
        ("4b", 14, 512, 160, 112, 224, 24, 64, 64),
        ("4c", 14, 512, 128, 128, 256, 24, 64, 64),
        ("4d", 14, 512, 112, 144, 288, 32, 64, 64),
        ("4e", 14, 528, 256, 160, 320, 32, 128, 128),
        None,
        ("5a", 7, 832, 256, 160, 320, 32, 128, 128),
        ("5b", 7, 832, 384, 192, 384, 48, 128, 128),
    ]
    pools = iter([("pool3", 480, 14), ("pool4", 832, 7)])
    for row in table:
        if row is None:
            name, ch, size = next(pools)
            b.pool(name, ch, size, 3, 2)
            continue
        tag, size, cin, c1, r3, c3, r5, c5, proj = row
        p = f"inception{tag}"
        b.conv(f"{p}.1x1", cin, c1, size, 1, bias=True)
        b.conv(f"{p}.3x3_reduce", cin, r3, size, 1, bias=True)
        b.conv(f"{p}.3x3", r3, c3, size, 3, bias=True)
        b.conv(f"{p}.5x5_reduce", cin, r5, size, 1, bias=True)
        b.conv(f"{p}.5x5", r5, c5, size, 5, bias=True)
        b.pool(f"{p}.pool", cin, size, 3, 1)
        b.conv(f"{p}.pool_proj", cin, proj, size, 1, bias=True)
    b.pool("avgpool", 1024, 1, 7, 1)
    b.fc("fc", 1024, 1000)
    b.write("googlenet.json")


def mlp():
    b = Builder("mlp", 8)
    widths = [1024, 4096, 4096, 4096, 1024]
    for i in range(len(widths) - 1):
        b.fc(f"fc{i + 1}", widths[i], widths[i + 1])
        if i + 2 < len(widths):
            b.pool(f"relu{i + 1}", widths[i + 1], 1, 1, 1)
    b.write("mlp.json")


if __name__ == "__main__":
    resnet50()
    vgg16()
    googlenet()
    mlp()
