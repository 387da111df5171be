"""An example initialization script: writes starter JSON documents for the CLI."""

import sys
from pathlib import Path

from invtrain.config.storage import atomic_writer
from invtrain.schemas import ChipSpec, TrainConfig
from invtrain.scm import confounded_chip_graph


def example_documents() -> dict[str, str]:
    """Default chip spec and training config, and the two-class confounded chip graph."""

    return {
        "spec.json": ChipSpec().model_dump_json(indent=2),
        "config.json": TrainConfig().model_dump_json(indent=2),
        "dag.json": confounded_chip_graph(ChipSpec().confound_strength).to_document().model_dump_json(indent=2),
    }


def write_examples(out_dir) -> list[Path]:
    """Write every example document that does not exist yet; returns the written paths."""

    out_dir = Path(out_dir)
    written = []
    for name, content in example_documents().items():
        path = out_dir / name
        if path.exists():
            print(f"{path} already exists, skipping.")
            continue
        with atomic_writer(path) as handle:
            handle.write(content + "\n")
        written.append(path)
    return written


if __name__ == "__main__":
    for written_path in write_examples(sys.argv[1] if len(sys.argv) > 1 else "examples-json"):
        print(f"wrote {written_path}")
