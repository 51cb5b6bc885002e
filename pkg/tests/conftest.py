import hypothesis
import pytest

from hovefl.core.data import generate_classification, generate_regression
from hovefl.core.models import ModelKind, ParamLayout

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)


@pytest.fixture
def regression_data():
    return generate_regression(60, 4, 0.1, seed=3)


@pytest.fixture
def classification_data():
    return generate_classification(90, 5, 3, 2.5, seed=4)


@pytest.fixture
def ridge_layout(regression_data):
    return ParamLayout.for_dataset(ModelKind.RIDGE, regression_data)
