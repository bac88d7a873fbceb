import pytest

from flowdesk import Step
from flowdesk.experiments.base import ExperimentStep
from flowdesk.experiments.training import TrainFlowMatchingStep
from flowdesk.utilities import ensure_dir, get_fully_qualified_class_name, import_class


def what_is_your_quest():
    pass


class HovercraftFullOfEels:
    pass


def test_import_class():
    step_class = import_class("flowdesk.Step", subclassof=Step)
    assert step_class is Step


def test_import_class_subclass():
    name = "flowdesk.experiments.training.TrainFlowMatchingStep"
    cls = import_class(name, subclassof=ExperimentStep)
    assert cls is TrainFlowMatchingStep


def test_import_class_on_func():
    with pytest.raises(TypeError, match="is not a class"):
        import_class("test_utilities.what_is_your_quest", subclassof=Step)


def test_import_class_not_subclass():
    with pytest.raises(TypeError, match="not a subclass of Step"):
        import_class("test_utilities.HovercraftFullOfEels", subclassof=Step)


def test_import_class_no_module():
    with pytest.raises(ImportError):
        import_class("Foo", subclassof=Step)


def test_import_class_from_config_dir(tmp_path):
    (tmp_path / "local_steps.py").write_text(
        "from flowdesk import Step\n\n\nclass LocalStep(Step):\n    pass\n"
    )
    config_file = str(tmp_path / "local.cfg")
    cls = import_class("local_steps.LocalStep", Step, config_file=config_file)
    assert cls.__name__ == "LocalStep"
    assert issubclass(cls, Step)


@pytest.mark.parametrize(
    ("value", "expected"),
    [
        (TrainFlowMatchingStep, "flowdesk.experiments.training.TrainFlowMatchingStep"),
        (HovercraftFullOfEels(), "test_utilities.HovercraftFullOfEels"),
        (int, "int"),
        (1.5, "float"),
    ],
)
def test_fully_qualified_class_name(value, expected):
    assert get_fully_qualified_class_name(value) == expected


def test_ensure_dir(tmp_path):
    path = tmp_path / "a" / "b"
    assert ensure_dir(str(path)) == str(path)
    assert path.is_dir()
    # existing directories are fine
    ensure_dir(str(path))
