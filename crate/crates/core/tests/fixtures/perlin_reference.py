"""Reference gradient-noise mask, written directly from the textbook formula.

Reads lattice angles from perlin_64_p8.json, writes the field and the
thresholded mask back into the same file.
"""
import json
import math
import sys

import numpy as np


def fade(t):
    return 6 * t**5 - 15 * t**4 + 10 * t**3


def rand_perlin_2d(shape, res, angles):
    delta = (res[0] / shape[0], res[1] / shape[1])
    d = (shape[0] // res[0], shape[1] // res[1])
    grid = np.mgrid[0 : res[0] : delta[0], 0 : res[1] : delta[1]].transpose(1, 2, 0) % 1
    gradients = np.stack((np.cos(angles), np.sin(angles)), axis=-1)

    def tile(s1, s2):
        g = gradients[s1[0] : s1[1], s2[0] : s2[1]]
        return np.repeat(np.repeat(g, d[0], axis=0), d[1], axis=1)

    def dot(grad, shift):
        off = np.stack((grid[..., 0] + shift[0], grid[..., 1] + shift[1]), axis=-1)
        return (off[: shape[0], : shape[1]] * grad[: shape[0], : shape[1]]).sum(axis=-1)

    n00 = dot(tile([0, -1], [0, -1]), [0, 0])
    n10 = dot(tile([1, None], [0, -1]), [-1, 0])
    n01 = dot(tile([0, -1], [1, None]), [0, -1])
    n11 = dot(tile([1, None], [1, None]), [-1, -1])
    t = fade(grid[: shape[0], : shape[1]])
    lerp = lambda a, b, w: a + w * (b - a)
    return math.sqrt(2) * lerp(lerp(n00, n10, t[..., 0]), lerp(n01, n11, t[..., 0]), t[..., 1])


def main(path):
    with open(path) as f:
        doc = json.load(f)
    angles = np.array(doc["angles"], dtype=np.float64)
    h, w = doc["height"], doc["width"]
    res = (angles.shape[0] - 1, angles.shape[1] - 1)
    field = rand_perlin_2d((h, w), res, angles)
    norm = (field - field.min()) / (field.max() - field.min())
    doc["field"] = field.tolist()
    doc["mask"] = (norm > doc["threshold"]).astype(int).tolist()
    with open(path, "w") as f:
        json.dump(doc, f)


if __name__ == "__main__":
    main(sys.argv[1])
