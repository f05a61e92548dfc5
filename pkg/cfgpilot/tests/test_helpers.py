from app.utils.helpers import MASK64, derive_seed, fnv1a_64, format_duration, splitmix64


def test_fnv1a_reference_values():
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C


def test_splitmix64_reference_value():
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_derive_seed_is_stable_and_separates_stages():
    assert derive_seed(0, "denoiser") == derive_seed(0, "denoiser")
    seeds = {derive_seed(0, name) for name in ("data", "denoiser", "classifier", "controller")}
    assert len(seeds) == 4
    assert derive_seed(1, "data") != derive_seed(0, "data")
    assert 0 <= derive_seed(2**70, "data") <= MASK64


def test_format_duration():
    assert format_duration(12.34) == "12.3s"
    assert format_duration(125) == "2m 5s"
    assert format_duration(7260) == "2h 1m"
