#!/usr/bin/env python3
"""Reference writer for emogate corpus directories.

Feed it utterances from any feature extractor and it writes
`manifest.toml` plus one `.bin` bundle per utterance in the layout
described in docs/format.md. Only the standard library is used.

    from write_bundle import CorpusWriter
    w = CorpusWriter("out", domains={"english": ["angry", "happy", "neutral", "sad"]},
                     features={"wav2vec": ("vector", 768), "mfcc": ("sequence", 40)})
    w.add("utt1", "english", "happy", {"wav2vec": vec, "mfcc": frames})
    w.close()

Vectors are flat lists of floats. Sequences are lists of frames, each a
list of `dim` floats.
"""

import os
import re
import struct

MAGIC = b"SERB"
VERSION = 1
MANIFEST_VERSION = 1


def _str(s):
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ValueError(f"string too long: {s[:40]}...")
    return struct.pack("<H", len(b)) + b


def _toml_str(s):
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def encode_bundle(utterance, domain, label, features):
    """`features` is a list of (name, kind, value) in manifest order."""
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    for s in (utterance, domain, label):
        out += _str(s)
    out += struct.pack("<H", len(features))
    for name, kind, value in features:
        out += _str(name)
        if kind == "vector":
            flat = [float(x) for x in value]
            out += struct.pack("<BI", 0, len(flat))
        elif kind == "sequence":
            frames = [list(f) for f in value]
            width = len(frames[0]) if frames else 0
            if any(len(f) != width for f in frames):
                raise ValueError(f"{utterance}: ragged frames in `{name}`")
            flat = [float(x) for f in frames for x in f]
            out += struct.pack("<BII", 1, len(frames), width)
        else:
            raise ValueError(f"unknown kind {kind!r}")
        out += struct.pack(f"<{len(flat)}f", *flat)
    return bytes(out)


class CorpusWriter:
    def __init__(self, root, domains, features):
        self.root = root
        self.domains = domains
        self.features = features
        self.entries = []
        os.makedirs(os.path.join(root, "bundles"), exist_ok=True)

    def add(self, utterance, domain, label, values):
        if label not in self.domains.get(domain, []):
            raise ValueError(f"{utterance}: undeclared domain/label {domain}/{label}")
        if set(values) != set(self.features):
            raise ValueError(f"{utterance}: features {sorted(values)} != {sorted(self.features)}")
        blocks = []
        for name, (kind, dim) in self.features.items():
            v = values[name]
            width = len(v) if kind == "vector" else (len(v[0]) if len(v) else dim)
            if width != dim:
                raise ValueError(f"{utterance}: `{name}` has width {width}, expected {dim}")
            blocks.append((name, kind, v))
        stem = re.sub(r"[^A-Za-z0-9._-]", "_", utterance)
        rel = f"bundles/{stem}.bin"
        with open(os.path.join(self.root, rel), "wb") as f:
            f.write(encode_bundle(utterance, domain, label, blocks))
        self.entries.append((utterance, rel))

    def close(self):
        lines = [f"version = {MANIFEST_VERSION}", ""]
        for name, labels in self.domains.items():
            lines += ["[[domains]]", f"name = {_toml_str(name)}",
                      "labels = [" + ", ".join(_toml_str(l) for l in labels) + "]", ""]
        for name, (kind, dim) in self.features.items():
            lines += ["[[features]]", f"name = {_toml_str(name)}", f"kind = {_toml_str(kind)}",
                      f"dim = {dim}", ""]
        for utt, rel in self.entries:
            lines += ["[[utterances]]", f"id = {_toml_str(utt)}", f"file = {_toml_str(rel)}", ""]
        with open(os.path.join(self.root, "manifest.toml"), "w", encoding="utf-8") as f:
            f.write("\n".join(lines))


if __name__ == "__main__":
    import random
    import sys

    out = sys.argv[1] if len(sys.argv) > 1 else "toy-corpus"
    rng = random.Random(0)
    labels = ["angry", "happy", "neutral", "sad"]
    w = CorpusWriter(out, {"english": labels}, {"emb": ("vector", 8), "mfcc": ("sequence", 4)})
    for i in range(24):
        w.add(f"utt{i:03}", "english", labels[i % 4], {
            "emb": [rng.gauss(0, 1) for _ in range(8)],
            "mfcc": [[rng.gauss(0, 1) for _ in range(4)] for _ in range(rng.randint(5, 12))],
        })
    w.close()
    print(f"wrote 24 utterances to {out}")
