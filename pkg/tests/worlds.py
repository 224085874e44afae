"""Small hand-built worlds shared by several test modules."""

import numpy as np

from propinherit.world import Concept, EmbeddingSpace, World


def hand_world():
    concepts = {
        "bird": Concept("bird", "birds"),
        "robin": Concept("robin", "robins"),
        "sparrow": Concept("sparrow", "sparrows"),
        "food": Concept("food", "foods"),
        "honey": Concept("honey", mass=True),
        "bread": Concept("bread", "breads"),
    }
    taxonomy = {"bird": ("robin", "sparrow"), "food": ("honey", "bread")}
    vecs = {
        "bird": [1.0, 0.0, 0.0, 0.0],
        "robin": [0.9, 0.1, 0.0, 0.0],
        "sparrow": [0.8, 0.0, 0.3, 0.0],
        "food": [0.0, 1.0, 0.0, 0.0],
        "honey": [0.1, 0.9, 0.0, 0.2],
        "bread": [0.0, 0.7, 0.0, 0.5],
    }
    space = EmbeddingSpace("synthetic", "synthetic", {k: np.array(v) for k, v in vecs.items()})
    return World(concepts, taxonomy, {"synthetic": space})
