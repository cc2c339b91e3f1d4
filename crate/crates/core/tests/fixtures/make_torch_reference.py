"""Writes torch_tiny.d2wb: a small randomly initialised VGG16-topology bank
plus reference activations computed by PyTorch.

Entries follow the weight-bank layout (`<layer>.weight`, `<layer>.bias`,
`__norm__`, `__final_relu__`) and add
  __ref_in__        32x32x3 input image in [0, 1], HWC
  __ref_out__       conv4_3 output of the train variant, HWC
  __ref_out_test__  conv4_3 output of the test variant, HWC
"""

import struct
import sys
import zlib
from pathlib import Path

import torch
import torch.nn.functional as F

WIDTHS = [8, 16, 32, 64]
BLOCKS = [["conv1_1", "conv1_2"], ["conv2_1", "conv2_2"],
          ["conv3_1", "conv3_2", "conv3_3"], ["conv4_1", "conv4_2", "conv4_3"]]
MEAN = [0.485, 0.456, 0.406]
STD = [0.229, 0.224, 0.225]


def build_weights(gen):
    params = {}
    cin = 3
    for block, names in enumerate(BLOCKS):
        for name in names:
            cout = WIDTHS[block]
            bound = (6.0 / (cin * 9)) ** 0.5
            params[name] = (
                (torch.rand(cout, cin, 3, 3, generator=gen) * 2 - 1) * bound,
                (torch.rand(cout, generator=gen) * 2 - 1) * 0.1,
            )
            cin = cout
    return params


def run(x, params, variant):
    for block, names in enumerate(BLOCKS):
        dil = 2 if (block == 3 and variant == "test") else 1
        for idx, name in enumerate(names):
            w, b = params[name]
            x = F.conv2d(x, w, b, padding=dil, dilation=dil)
            if not (block == 3 and idx == len(names) - 1):
                x = F.relu(x)
        if block == 2 and variant == "test":
            x = F.avg_pool2d(F.pad(x, (0, 1, 0, 1), mode="replicate"), 2, stride=1)
        elif block < 3:
            x = F.max_pool2d(x, 2, stride=2)
    return x


def entry(name, array):
    data = array.detach().to(torch.float32).contiguous().numpy()
    payload = data.astype("<f4").tobytes()
    out = struct.pack("<H", len(name)) + name.encode() + struct.pack("<BB", 0, data.ndim)
    out += b"".join(struct.pack("<I", d) for d in data.shape)
    return out + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def main(out_path):
    torch.set_default_dtype(torch.float64)
    gen = torch.Generator().manual_seed(20190206)
    params = build_weights(gen)
    img = torch.rand(32, 32, 3, generator=gen)
    mean = torch.tensor(MEAN).view(1, 3, 1, 1)
    std = torch.tensor(STD).view(1, 3, 1, 1)
    x = (img.permute(2, 0, 1).unsqueeze(0) - mean) / std
    # weights are rounded to f32 first so both engines see identical values
    params = {k: (w.float().double(), b.float().double()) for k, (w, b) in params.items()}
    x = x.float().double()
    entries = {}
    for name, (w, b) in params.items():
        entries[f"{name}.weight"] = w
        entries[f"{name}.bias"] = b
    entries["__norm__"] = torch.tensor(MEAN + STD)
    entries["__final_relu__"] = torch.tensor([0.0])
    entries["__ref_in__"] = img
    entries["__ref_out__"] = run(x, params, "train")[0].permute(1, 2, 0)
    entries["__ref_out_test__"] = run(x, params, "test")[0].permute(1, 2, 0)
    body = b"".join(entry(k, v) for k, v in sorted(entries.items()))
    Path(out_path).write_bytes(b"D2WB" + struct.pack("<II", 1, len(entries)) + body)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).with_name("torch_tiny.d2wb"))
