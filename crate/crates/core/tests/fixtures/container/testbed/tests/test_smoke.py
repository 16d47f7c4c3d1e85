from pathlib import Path

DATA = Path("/testbed/smokepkg/data.txt")


def test_data_present():
    assert DATA.read_text().startswith("answer")


def test_arithmetic():
    assert 6 * 7 == 42
