"""Golden file access for deterministic CLI output."""

import re
from pathlib import Path
from typing import Optional

import pytest


def get_golden_files_dir() -> Path:
    return Path(__file__).parent / "golden_files"


def get_golden_file_path(filename: str) -> Path:
    return get_golden_files_dir() / filename


def read_golden_file(filename: str) -> Optional[str]:
    file_path = get_golden_file_path(filename)
    if file_path.exists():
        return file_path.read_text(encoding="utf-8")
    return None


def write_golden_file(filename: str, content: str) -> None:
    file_path = get_golden_file_path(filename)
    file_path.parent.mkdir(exist_ok=True)
    file_path.write_text(content, encoding="utf-8")


def should_update_golden(request) -> bool:
    return request.config.getoption("--update-golden", default=False)


def normalize_output(content: str) -> str:
    """Replace temp directories and line endings that differ between runs and platforms."""
    content = content.replace("\r\n", "\n")
    content = re.sub(r"C:\\\\Users\\\\[^\\\\\"]+\\\\AppData\\\\Local\\\\Temp\\\\[^\\\\\"]+", "<TEMP_DIR>", content)
    content = re.sub(r"/tmp/[^/\"]+", "<TEMP_DIR>", content)
    return content


def compare_with_golden(actual_content: str, golden_filename: str, request) -> bool:
    """True when normalized content matches; with --update-golden the file is rewritten first."""
    normalized_actual = normalize_output(actual_content)
    if should_update_golden(request):
        write_golden_file(golden_filename, normalized_actual)
        return True

    golden_content = read_golden_file(golden_filename)
    if golden_content is None:
        pytest.fail(f"Golden file {golden_filename} not found and --update-golden not specified")
    return normalized_actual == normalize_output(golden_content)
