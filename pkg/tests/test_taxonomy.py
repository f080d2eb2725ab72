import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from synthpan.taxonomy import (
    UNLABELED, TaxonomyError, categories_to_image, color_to_category, default_taxonomy, dumps,
    from_records, image_to_categories, load_taxonomy, loads,
)


def test_default_palette_has_35_categories():
    tax = default_taxonomy()
    assert len(tax) == 35
    assert [c.index for c in tax] == list(range(35))
    assert tax.things and tax.stuff
    assert tax.by_name("floor").kind == "stuff"
    assert tax.by_name("screwdriver").isthing


def test_single_stuff_category():
    tax = loads("floor,1,2,3,stuff\n")
    assert len(tax) == 1
    assert tax[0].color == (1, 2, 3)
    assert tax[0].kind == "stuff"


@pytest.mark.parametrize("doc, fragment", [
    ("a,10,10,10,stuff\nb,10,10,10,thing\n", "duplicate color"),
    ("a,1,1,1,stuff\na,2,2,2,thing\n", "duplicate name"),
    ("a,0,0,0,stuff\n", "black"),
    ("a,1,2,stuff\n", "5 fields"),
    ("a,1,2,x,stuff\n", "integer"),
    ("a,1,2,300,stuff\n", "0..255"),
    ("a,1,2,3,blob\n", "kind"),
])
def test_invalid_documents(doc, fragment):
    with pytest.raises(TaxonomyError, match=fragment):
        loads(doc)


def test_header_comments_and_stream(tmp_path):
    doc = "# palette\n\nname,r,g,b,kind\nfloor,1,2,3,stuff\ntool,4,5,6,thing\n"
    p = tmp_path / "t.txt"
    p.write_text(doc)
    assert load_taxonomy(p) == load_taxonomy(io.StringIO(doc))
    assert [c.name for c in load_taxonomy(p)] == ["floor", "tool"]


def test_golden_document_parses_to_expected_fields():
    tax = default_taxonomy()
    assert tax[0].name == "floor" and tax[0].color == (128, 64, 128)
    assert tax.by_name("power_supply").color == (255, 0, 0)
    assert sum(c.isthing for c in tax) == 27
    assert sum(not c.isthing for c in tax) == 8


def test_color_lookup():
    tax = default_taxonomy()
    assert color_to_category(tax, tax[7].color) == 7
    assert color_to_category(tax, (0, 0, 0)) == UNLABELED
    assert color_to_category(tax, (1, 1, 1)) == UNLABELED


def test_lookup_is_a_bijection_over_the_palette():
    tax = default_taxonomy()
    for cat in tax:
        assert color_to_category(tax, cat.color) == cat.index


def test_round_trip():
    tax = default_taxonomy()
    again = loads(dumps(tax))
    assert again == tax
    for a, b in zip(again, tax):
        assert (a.index, a.name, a.color, a.kind) == (b.index, b.name, b.color, b.kind)


@given(st.lists(st.tuples(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255)),
                min_size=1, max_size=20, unique=True),
       st.lists(st.booleans(), min_size=20, max_size=20))
def test_round_trip_property(colors, kinds):
    colors = [c for c in colors if c != (0, 0, 0)]
    if not colors:
        return
    tax = from_records((f"c{i}", c, "thing" if kinds[i] else "stuff") for i, c in enumerate(colors))
    assert loads(dumps(tax)) == tax


def test_vectorized_lookup_matches_scalar(rng):
    tax = default_taxonomy()
    pal = tax.palette()
    img = pal[rng.integers(0, len(tax), size=(9, 11))]
    img[0, 0] = (0, 0, 0)
    img[1, 1] = (3, 3, 3)
    cats = image_to_categories(tax, img)
    for y in range(9):
        for x in range(11):
            assert cats[y, x] == color_to_category(tax, img[y, x])
    back = categories_to_image(tax, cats)
    assert np.array_equal(back[cats >= 0], img[cats >= 0])
    assert (back[cats < 0] == 0).all()
