from pathlib import Path

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from carid.config import (
    MissingGroupFile,
    ParseError,
    TypeMismatch,
    UnknownOverridePath,
    Violation,
    compose,
    deep_merge,
    parse_scalar,
    read_defaults,
    serialize,
    validate,
)

REPO_CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _make_root(tmp_path, files, defaults):
    for rel, content in files.items():
        path = tmp_path / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(content))
    entries = [{g: n} for g, n in defaults]
    (tmp_path / "defaults.yaml").write_text(yaml.safe_dump({"defaults": entries}))
    return tmp_path


class TestComposeGoldenSuite:
    """Ten composition cases: merge precedence, overrides, strictness."""

    def test_01_disjoint_groups_union(self, tmp_path):
        root = _make_root(tmp_path, {
            "data/a.yaml": {"root": "x"},
            "model/b.yaml": {"name": "resnet50"},
        }, [("data", "a"), ("model", "b")])
        node = compose(root)
        assert node == {"data": {"root": "x"}, "model": {"name": "resnet50"}}

    def test_02_reported_best_lr_override(self):
        node = compose(REPO_CONFIGS, overrides=["model.optimizer.lr=0.00157"])
        assert node["model"]["optimizer"]["lr"] == 0.00157

    def test_03_unknown_override_path(self):
        with pytest.raises(UnknownOverridePath):
            compose(REPO_CONFIGS, overrides=["model.nonexistent=1"])

    def test_04_later_group_wins(self, tmp_path):
        root = _make_root(tmp_path, {
            "data/a.yaml": {"root": "x", "nested": {"k": 1, "keep": True}},
            "data/b.yaml": {"nested": {"k": 2}},
        }, [("data", "a"), ("data", "b")])
        node = compose(root)
        assert node["data"]["nested"] == {"k": 2, "keep": True}
        assert node["data"]["root"] == "x"

    def test_05_type_mismatch_numeric_slot(self):
        with pytest.raises(TypeMismatch):
            compose(REPO_CONFIGS, overrides=["model.optimizer.lr=fast"])

    def test_06_type_mismatch_non_scalar_slot(self):
        with pytest.raises(TypeMismatch):
            compose(REPO_CONFIGS, overrides=["model.optimizer=3"])

    def test_07_missing_group_file(self):
        with pytest.raises(MissingGroupFile):
            compose(REPO_CONFIGS, defaults=[("model", "no_such_model")])

    def test_08_parse_error_names_file(self, tmp_path):
        root = _make_root(tmp_path, {}, [("data", "broken")])
        (root / "data").mkdir(exist_ok=True)
        (root / "data/broken.yaml").write_text("key: [unclosed\n")
        with pytest.raises(ParseError) as err:
            compose(root)
        assert "broken.yaml" in str(err.value)

    def test_09_roundtrip_serialize_reparse(self):
        node = compose(REPO_CONFIGS, overrides=["model.optimizer.lr=0.00157"])
        assert yaml.safe_load(serialize(node)) == node

    def test_10_env_escape(self, tmp_path, monkeypatch):
        root = _make_root(tmp_path, {"data/a.yaml": {"root": "${env:CARID_DATA}"}},
                          [("data", "a")])
        monkeypatch.setenv("CARID_DATA", "/srv/corpus")
        assert compose(root)["data"]["root"] == "/srv/corpus"
        monkeypatch.delenv("CARID_DATA")
        with pytest.raises(Exception):
            compose(root)


class TestScalarParsing:
    @pytest.mark.parametrize("text,expected", [
        ("1", 1), ("-3", -3), ("0.5", 0.5), ("1e-4", 1e-4),
        ("true", True), ("False", False), ("adam", "adam"), ("1.0.0", "1.0.0"),
    ])
    def test_precedence(self, text, expected):
        value = parse_scalar(text)
        assert value == expected and type(value) is type(expected)


class TestMergeProperties:
    nested = st.recursive(
        st.dictionaries(st.sampled_from("abcd"), st.integers(), max_size=3),
        lambda children: st.dictionaries(st.sampled_from("abcd"),
                                         st.one_of(st.integers(), children), max_size=3),
        max_leaves=8,
    )

    @given(nested, nested, nested)
    @settings(max_examples=60, deadline=None)
    def test_merge_associative(self, a, b, c):
        assert deep_merge(deep_merge(a, b), c) == deep_merge(a, deep_merge(b, c))

    @given(nested)
    @settings(max_examples=30, deadline=None)
    def test_merge_idempotent(self, a):
        assert deep_merge(a, a) == a
        assert deep_merge(a, {}) == a


class TestDefaultsFile:
    def test_repo_defaults_parse(self):
        entries = read_defaults(REPO_CONFIGS)
        assert entries[0][0] == "data"
        assert ("model", "efficientnetv2_b2") in entries

    def test_missing_defaults(self, tmp_path):
        with pytest.raises(MissingGroupFile):
            read_defaults(tmp_path)


class TestValidate:
    def test_repo_default_config_is_valid(self):
        assert validate(compose(REPO_CONFIGS)) == []

    def test_dropout_outside_tuning_range(self):
        node = compose(REPO_CONFIGS, overrides=["model.net.dropout_value=0.7"])
        violations = validate(node)
        assert any(v.path == "model.net.dropout_value" for v in violations)

    def test_dropout_outside_tuning_range_ok_without_hpo(self):
        node = compose(REPO_CONFIGS, overrides=["model.net.dropout_value=0.7"])
        node.pop("hpo")
        assert validate(node) == []

    def test_batch_size_64_valid(self):
        node = compose(REPO_CONFIGS, overrides=["data.batch_size=64"])
        assert not [v for v in validate(node) if v.path == "data.batch_size"]

    def test_negative_lr_flagged(self):
        node = compose(REPO_CONFIGS)
        node["model"]["optimizer"]["lr"] = -0.1
        assert any(v.path == "model.optimizer.lr" for v in validate(node))

    def test_missing_required_field_flagged(self):
        node = compose(REPO_CONFIGS)
        del node["model"]["optimizer"]["lr"]
        violations = validate(node)
        assert any(v.path == "model.optimizer.lr" and "missing" in v.constraint
                   for v in violations)

    def test_violation_is_printable(self):
        v = Violation("a.b", 3, "in (0, 1)")
        assert "a.b" in str(v) and "in (0, 1)" in str(v)
