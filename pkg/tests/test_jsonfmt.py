import json
import math

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from qnetld.jsonfmt import csv_float, dumps

finite = st.floats(allow_nan=False, allow_infinity=False)
values = st.recursive(st.none() | st.booleans() | st.integers(-10**6, 10**6) | finite | st.text(),
                      lambda inner: st.lists(inner, max_size=4)
                      | st.dictionaries(st.text(max_size=5), inner, max_size=4),
                      max_leaves=20)


@given(finite)
def test_float_round_trip(x):
    y = json.loads(dumps(x))
    assert y == x
    assert float(csv_float(x)) == x


@given(values)
def test_dump_load_dump_is_stable(obj):
    text = dumps(obj)
    assert dumps(json.loads(text)) == text


def test_special_values():
    assert dumps(-0.0) == "0"
    assert dumps([math.inf, math.nan]) == "[null, null]"
    assert dumps(np.array([1.5, 2.0])) == "[1.5, 2]"
    assert dumps({"a": [1, [2, 3]]}) == '{\n  "a": [1, [2, 3]]\n}'
    assert csv_float(-0.0) == "0"
    assert csv_float(math.nan) == "nan" and csv_float(-math.inf) == "-inf"
