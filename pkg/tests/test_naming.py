import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydra_dqm.errors import MalformedName
from hydra_dqm.naming import FileNameFields, format_filename, parse_filename


def test_parse_basic():
    fields = parse_filename("occupancy_r1001_s7_t1700000000000.png")
    assert fields == FileNameFields("occupancy", 1001, 7, 1700000000000, "png")


def test_plot_type_name_may_contain_underscores():
    fields = parse_filename("cdc_occupancy_r1_s2_t3.pgm")
    assert fields.plot_type_name == "cdc_occupancy"
    assert (fields.run_number, fields.sequence, fields.capture_time_ms) == (1, 2, 3)


def test_name_with_numeric_looking_tail():
    # greedy name match: the convention suffix is parsed from the right
    fields = parse_filename("adc_r5_s6_t7_r1_s2_t3.ppm")
    assert fields.plot_type_name == "adc_r5_s6_t7"
    assert fields.run_number == 1


@pytest.mark.parametrize("bad", [
    "occupancy_r1001.png",           # missing fields
    "occupancy_r1_s2_t3.gif",        # unknown extension
    "occupancy_r1_s2_t3",            # no extension
    "_r1_s2_t3.png",                 # empty plot type name
    "occupancy_rx_s2_t3.png",        # non-numeric run
    "occupancy_r01_s2_t3.png",       # non-canonical number
    "occupancy_r1_s2_t3.png.bak",
])
def test_malformed_names_rejected(bad):
    with pytest.raises(MalformedName):
        parse_filename(bad)


name_strategy = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"),
                           whitelist_characters="_-"),
    min_size=1, max_size=20)


@settings(max_examples=1000)
@given(name=name_strategy,
       run=st.integers(min_value=0, max_value=10 ** 9),
       seq=st.integers(min_value=0, max_value=10 ** 9),
       ms=st.integers(min_value=0, max_value=10 ** 14),
       ext=st.sampled_from(["png", "ppm", "pgm"]))
def test_round_trip(name, run, seq, ms, ext):
    fields = FileNameFields(name, run, seq, ms, ext)
    formatted = format_filename(fields)
    assert parse_filename(formatted) == fields
    assert format_filename(parse_filename(formatted)) == formatted
