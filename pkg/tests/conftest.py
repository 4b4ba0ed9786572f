import pytest

from spedn import data_path
from spedn.kg import load_kg
from spedn.qgraph import load_ordinals


@pytest.fixture(scope="session")
def geo_kg():
    return load_kg(data_path("geo", "kg.txt"))


@pytest.fixture(scope="session")
def atis_kg():
    return load_kg(data_path("atis", "kg.txt"))


@pytest.fixture(scope="session")
def geo_lex():
    return load_ordinals(data_path("geo", "ordinals.txt"))


@pytest.fixture(scope="session")
def atis_lex():
    return load_ordinals(data_path("atis", "ordinals.txt"))


@pytest.fixture(scope="session")
def geo_alias():
    from spedn.prep import load_aliases

    return load_aliases(data_path("geo", "aliases.txt"))


@pytest.fixture(scope="session")
def atis_alias():
    from spedn.prep import load_aliases

    return load_aliases(data_path("atis", "aliases.txt"))
