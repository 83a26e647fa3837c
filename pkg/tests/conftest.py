import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from gridcharge import netmodel

DATA_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "data")


def data_path(name: str) -> str:
    return os.path.join(DATA_DIR, name)


@pytest.fixture(scope="session")
def edge1_tree():
    return netmodel.validate_tree(netmodel.load_network(data_path("synthetic_edge1.csv")))


@pytest.fixture(scope="session")
def path3_tree():
    return netmodel.validate_tree(netmodel.load_network(data_path("synthetic_path3.csv")))


@pytest.fixture(scope="session")
def star5_tree():
    return netmodel.validate_tree(netmodel.load_network(data_path("synthetic_star5.csv")))


@pytest.fixture(scope="session")
def tree12():
    return netmodel.validate_tree(netmodel.load_network(data_path("synthetic_tree12.csv")))


@pytest.fixture(scope="session")
def edge1_index(edge1_tree):
    return netmodel.subtree_index(edge1_tree)


@pytest.fixture(scope="session")
def path3_index(path3_tree):
    return netmodel.subtree_index(path3_tree)


@pytest.fixture(scope="session")
def star5_index(star5_tree):
    return netmodel.subtree_index(star5_tree)


@pytest.fixture(scope="session")
def tree12_index(tree12):
    return netmodel.subtree_index(tree12)
