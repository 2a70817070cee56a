"""Run the full tiny-fixture pipeline through the CLI entry point."""
from pathlib import Path

from stdk import cli
from stdk.synthetic import write_fixture

STEPS = [
    ["ingest"],
    ["train-interp"],
    ["interpolate"],
    ["train-forecast"],
    ["forecast"],
    ["evaluate"],
    ["render", "--time", "10", "--triptych"],
]


def run_pipeline(directory, seed=0):
    directory = Path(directory)
    write_fixture(directory, seed=seed)
    config = str(directory / "config.toml")
    for step in STEPS:
        code = cli.main(step + ["--config", config])
        if code != 0:
            raise RuntimeError(f"{step[0]} exited with {code}")
    return directory / "out"


def artifact_bytes(out_dir):
    return {p.name: p.read_bytes() for p in sorted(Path(out_dir).iterdir()) if p.is_file()}
