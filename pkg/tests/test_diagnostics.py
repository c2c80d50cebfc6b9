import numpy as np
import pytest

from core.diagnostics import mask_to_pgm, pgm_to_allowed
from core.errors import SceneParseError


def test_pgm_reader_recovers_the_allowed_matrix(rng):
    allowed = rng.random((5, 7)) < 0.5
    assert np.array_equal(pgm_to_allowed(mask_to_pgm(allowed)), allowed)


@pytest.mark.parametrize("data, expected", [
    (b"P6\n2 2\n255\n\x00\x00\x00\x00", "expected an 8-bit binary PGM"),
    (b"P5\n2 2\n65535\n\x00\x00\x00\x00", "expected an 8-bit binary PGM"),
    (b"P5\n2 2", "expected an 8-bit binary PGM"),
    (b"P5\ntwo 2\n255\n\x00\x00\x00\x00", "bad PGM size"),
    (b"P5\n0 2\n255\n", "must be positive"),
    (b"P5\n3 3\n255\n\xff\xff\xff\x00", "truncated: 4 of 9 bytes"),
])
def test_malformed_pgm_raises_a_parse_error(data, expected):
    with pytest.raises(SceneParseError) as excinfo:
        pgm_to_allowed(data)
    assert expected in str(excinfo.value)
