import argparse
import json
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(1)


def parser(doc: str, **defaults) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--out", default="results")
    for k, v in defaults.items():
        p.add_argument("--" + k.replace("_", "-"), type=type(v), default=v)
    return p


def save(out, name, obj):
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / name, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=lambda o: o.tolist() if isinstance(o, np.ndarray)
                  else float(o))
        fh.write("\n")
    print(f"-> {path / name}")
