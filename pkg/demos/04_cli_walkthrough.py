"""The command-line pipeline on a small run: gen, train, eval, translate.

Everything lands in a temporary directory; the evaluation report is printed
at the end.  Equivalent shell usage::

    python3 -m csmoe gen --config run.json
    python3 -m csmoe train --config run.json
    python3 -m csmoe eval --config run.json --beam 4
    python3 -m csmoe translate --config run.json

Three hundred steps on 50 utterances is far too little for the held-out sets,
so expect high error rates; the point is the file layout and report format.

Run with ``python3 demos/04_cli_walkthrough.py`` (under a minute).
"""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from csmoe.cli import main

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp) / "run"
    config = {
        "seed": 0,
        "out": str(out),
        "corpus": {"n_train": 50, "n_eval": 10},
        "train": {"steps": 300},
        "checkpoint_every": 100,
        "decode": {"beam": 4, "st_beam": 4},
    }
    path = Path(tmp) / "run.json"
    path.write_text(json.dumps(config, indent=2))
    for command in ("gen", "train", "eval", "translate"):
        code = main([command, "--config", str(path)])
        print(f"{command}: exit {code}")
    print()
    print((out / "eval" / "report.txt").read_text().split("\nconfig ")[0])
    print("files:", sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())[:12], "...")
