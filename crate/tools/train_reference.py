#!/usr/bin/env python3
"""Train the reference classifier on a `cse gen-corpus` directory and export
it as a CSEW weight file with parity vectors.

    cse gen-corpus --seed 1 --count 1000 --out corpus/
    python3 tools/train_reference.py --corpus corpus/ --out crates/core/assets/reference.csew
"""

import argparse
import json
import struct
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

CONV_CHANNELS = (8, 16, 32)
INPUT_SHAPE = (3, 64, 64)
CLASSES = ("safe", "unsafe")
ACCURACY_FLOOR = 0.95


def build_model():
    c1, c2, c3 = CONV_CHANNELS
    return nn.Sequential(
        nn.Conv2d(3, c1, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(c1, c2, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(c2, c3, 3, 1, 1), nn.ReLU(),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        nn.Linear(c3, len(CLASSES)),
    )


def load_corpus(directory):
    manifest = json.loads((directory / "manifest.json").read_text())
    images, labels = [], []
    for item in manifest["items"]:
        rgb = np.asarray(Image.open(directory / item["file"]).convert("RGB"), dtype=np.float32) / 255.0
        images.append(rgb.transpose(2, 0, 1))
        labels.append(item["class"])
    return torch.from_numpy(np.stack(images)), torch.tensor(labels)


def split(n, seed):
    order = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    n_train, n_val = n * 8 // 10, n // 10
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def accuracy(model, x, y):
    with torch.no_grad():
        return (model(x).argmax(1) == y).float().mean().item()


def write_csew(path, model, channel_means, parity):
    out = bytearray(b"CSEW")
    biased = [m for m in model if isinstance(m, (nn.Conv2d, nn.Linear))]
    out += struct.pack("<II", 1, len(biased))
    for layer in biased:
        weight = layer.weight.detach().float().contiguous()
        bias = layer.bias.detach().float()
        out += struct.pack("<BI", 0 if isinstance(layer, nn.Conv2d) else 1, weight.dim())
        out += struct.pack(f"<{weight.dim()}I", *weight.shape)
        out += weight.numpy().astype("<f4").tobytes()
        out += struct.pack("<I", bias.numel()) + bias.numpy().astype("<f4").tobytes()
    out += np.asarray(channel_means, dtype="<f4").tobytes()
    out += struct.pack("<I", len(parity))
    for x, logits in parity:
        out += x.numpy().astype("<f4").tobytes() + logits.numpy().astype("<f4").tobytes()
    path.write_bytes(bytes(out))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--corpus", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--metrics", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--lr", type=float, default=3e-3)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--parity", type=int, default=8)
    parser.add_argument("--weight-decay", type=float, default=0.0)
    args = parser.parse_args()

    torch.manual_seed(args.seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)

    x, y = load_corpus(args.corpus)
    train, val, test = split(len(y), args.seed)
    model = build_model()
    optimizer = torch.optim.AdamW(model.parameters(), lr=args.lr, weight_decay=args.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    shuffle = torch.Generator().manual_seed(args.seed + 1)
    for epoch in range(args.epochs):
        model.train()
        for batch in train[torch.randperm(len(train), generator=shuffle)].split(args.batch):
            optimizer.zero_grad()
            loss = loss_fn(model(x[batch]), y[batch])
            loss.backward()
            optimizer.step()
        model.eval()
        print(f"epoch {epoch + 1}: loss {loss.item():.4f} val {accuracy(model, x[val], y[val]):.3f}", file=sys.stderr)

    test_accuracy = accuracy(model, x[test], y[test])
    channel_means = x[train].mean(dim=(0, 2, 3)).tolist()

    # Parity inputs: held-out images plus uniform noise; logits from a
    # float64 copy so the reference is free of float32 accumulation order.
    noise = torch.rand((args.parity - args.parity // 2, *INPUT_SHAPE), generator=torch.Generator().manual_seed(args.seed + 2))
    inputs = torch.cat([x[test[: args.parity // 2]], noise])
    reference = build_model().double()
    reference.load_state_dict({k: v.double() for k, v in model.state_dict().items()})
    with torch.no_grad():
        logits = reference(inputs.double()).float()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_csew(args.out, model, channel_means, list(zip(inputs, logits)))

    metrics = {
        "sizes": {"train": len(train), "validation": len(val), "test": len(test)},
        "test_accuracy": test_accuracy,
        "accuracy_floor": ACCURACY_FLOOR,
        "below_floor": test_accuracy < ACCURACY_FLOOR,
        "channel_means": channel_means,
        "seed": args.seed,
        "epochs": args.epochs,
        "torch": torch.__version__,
    }
    (args.metrics or args.out.with_suffix(".metrics.json")).write_text(json.dumps(metrics, indent=2) + "\n")
    print(json.dumps(metrics), file=sys.stderr)
    if metrics["below_floor"]:
        print(f"warning: test accuracy {test_accuracy:.3f} below {ACCURACY_FLOOR}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
