import json
import os
from collections.abc import Mapping

import pytest
from astropy.extern.configobj.configobj import ConfigObj, Section

from flowdesk import _cmdline, config_parser
from flowdesk.exceptions import ValidationError


def test_merge_config_nested_mapping():
    """
    Test that non-dict Mapping implementations are not
    converted to config sections.
    """
    config = ConfigObj()
    config_parser.merge_config(config, {"foo": {"bar": "baz"}})
    assert isinstance(config["foo"], Section)
    assert config["foo"]["bar"] == "baz"

    class TestMapping(Mapping):
        def __init__(self, delegate):
            self._delegate = delegate

        def __iter__(self):
            return iter(self._delegate)

        def __getitem__(self, key):
            return self._delegate[key]

        def __len__(self):
            return len(self._delegate)

    config = ConfigObj()
    config_parser.merge_config(config, {"foo": TestMapping({"bar": "baz"})})
    assert isinstance(config["foo"], TestMapping)
    assert config["foo"]["bar"] == "baz"


def test_load_spec_file_comments():
    class Foo:
        spec = """
        # initial comment
        bar = string(default='bam')  # an inline comment (with parentheses)
        # final comment
        """

    spec = config_parser.load_spec_file(Foo)
    assert "initial comment" in spec.initial_comment[0]
    assert "final comment" in spec.final_comment[0]
    assert "inline comment (with parentheses)" in spec.inline_comments["bar"]


def test_load_spec_file_not_inherited():
    class Foo:
        spec = "bar = integer(default=1)"

    class Bar(Foo):
        pass

    assert config_parser.load_spec_file(Bar) is None


SPEC = """
name = string(default='run')
size = integer(min=1, default=4)
[inner]
rate = float(default=0.5)
buckets = bucket_list(default=list())
"""


@pytest.fixture
def spec():
    return ConfigObj(SPEC.strip().splitlines(), list_values=False)


def test_validate_fills_defaults(spec):
    config = config_parser.config_from_dict({"inner": {"rate": "2"}}, spec)
    assert config["size"] == 4
    assert config["inner"]["rate"] == 2.0
    assert config["inner"]["buckets"] == []


def test_validate_reports_every_error(spec):
    with pytest.raises(ValidationError) as err:
        config_parser.config_from_dict({"size": "0", "inner": {"rate": "fast"}}, spec)
    message = str(err.value)
    assert "'size'" in message
    assert "'inner/rate'" in message


def test_validate_extra_value(spec):
    with pytest.raises(ValidationError, match="Extra value 'colour' in inner"):
        config_parser.config_from_dict({"inner": {"colour": "red"}}, spec)


@pytest.mark.parametrize(
    ("value", "expected"),
    [
        ("16x16", ["16x16"]),
        ("16X8, 4x4", ["16x8", "4x4"]),
        (["012x3"], ["12x3"]),
        ("", []),
    ],
)
def test_bucket_list(spec, value, expected):
    config = config_parser.config_from_dict({"inner": {"buckets": value}}, spec)
    assert config["inner"]["buckets"] == expected


@pytest.mark.parametrize("value", ["16", "0x4", "axb", "4x4x4"])
def test_bad_bucket_list(spec, value):
    with pytest.raises(ValidationError, match="HxW"):
        config_parser.config_from_dict({"inner": {"buckets": value}}, spec)


def test_load_json_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 3, "model": {"layers": 1}}))
    config = config_parser.load_config_file(str(path))
    assert config["seed"] == 3
    assert isinstance(config["model"], Section)
    assert config["model"]["layers"] == 1


def test_load_json_not_object(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("[1, 2]")
    with pytest.raises(ValidationError, match="not a JSON object"):
        config_parser.load_config_file(str(path))


def test_load_ini_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\n[model]\nlayers = 1\n")
    config = config_parser.load_config_file(str(path))
    assert config["seed"] == "3"
    assert config["model"]["layers"] == "1"


def test_load_missing_config(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        config_parser.load_config_file(str(tmp_path / "nope.cfg"))


def test_input_file_paths(tmp_path, tmp_cwd):
    spec = ConfigObj(["path = input_file(default=None)"], list_values=False)
    (tmp_path / "conf").mkdir()
    (tmp_path / "conf" / "a.txt").write_text("a")
    (tmp_cwd / "b.txt").write_text("b")

    config = config_parser.config_from_dict(
        {"path": "a.txt"}, spec, root_dir=str(tmp_path / "conf")
    )
    assert config["path"] == os.path.abspath(tmp_path / "conf" / "a.txt")

    # Command-line paths resolve against the working directory.
    config = config_parser.config_from_dict(
        {"path": _cmdline.FromCommandLine("b.txt")},
        spec,
        root_dir=str(tmp_path / "conf"),
    )
    assert config["path"] == os.path.abspath("b.txt")


def test_string_to_python_type():
    config = ConfigObj()
    config_parser.merge_config(
        config, {"a": "true", "b": "12", "c": "1.5", "d": "text", "e": ["1", "x"]}
    )
    config_parser.validate(config, None)
    assert config == {"a": True, "b": 12, "c": 1.5, "d": "text", "e": [1, "x"]}
