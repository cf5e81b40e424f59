"""Tests for process configuration and config files."""

from pathlib import Path

import pytest

from exnorm.config import Configuration, read_config_file, write_config_file
from exnorm.types import ConfigFileError


def test_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    for name in ("PROFILE", "LOG_LEVEL", "LOGGER", "SEED"):
        monkeypatch.delenv(f"EXNORM_{name}", raising=False)
    config = Configuration()
    assert config.profile == "development"
    assert config.log_level == "INFO"
    assert config.logger_name == "exnorm"
    assert config.seed == 0

    monkeypatch.setenv("EXNORM_PROFILE", "production")
    monkeypatch.setenv("EXNORM_SEED", "17")
    config = Configuration()
    assert config.profile == "production"
    assert config.seed == 17


def test_read_config_file(tmp_path: Path) -> None:
    path = tmp_path / "run.conf"
    path.write_text(
        "# a comment\n\nnorm = en\nweight-decay = 0.0005\n  r=4  \n"
    )
    assert read_config_file(path) == {
        "norm": "en",
        "weight_decay": "0.0005",
        "r": "4",
    }


@pytest.mark.parametrize("line", ["norm en", "= en"])
def test_read_config_file_errors(tmp_path: Path, line: str) -> None:
    path = tmp_path / "bad.conf"
    path.write_text(f"r = 4\n{line}\n")
    with pytest.raises(ConfigFileError) as excinfo:
        read_config_file(path)
    assert ":2:" in str(excinfo.value)


def test_write_config_file(tmp_path: Path) -> None:
    path = tmp_path / "resolved.conf"
    write_config_file(
        path,
        {"norm": "en", "variant": ("a",), "subset": None, "decay": [10, 20]},
    )
    assert path.read_text() == "decay = 10,20\nnorm = en\nvariant = a\n"
    assert read_config_file(path) == {
        "decay": "10,20",
        "norm": "en",
        "variant": "a",
    }
