"""Regenerate docs/cli.md from the argument parser and config defaults."""

from pathlib import Path

from glassdepth.cli import reference_markdown

if __name__ == "__main__":
    target = Path(__file__).resolve().parents[1] / "docs" / "cli.md"
    target.parent.mkdir(exist_ok=True)
    target.write_text(reference_markdown())
    print(f"wrote {target}")
