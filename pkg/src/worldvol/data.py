"""Simulator-backed datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sim

LOCATIONS = ("town", "city", "boston", "singapore")
ENVIRONMENTS = ("suburb", "downtown", "residential area")


@dataclass
class Sample:
    spec: sim.SceneSpec
    sequence: object
    images: list
    prompt: str


def random_spec(seed: int, layout: str | None = None, weather: str | None = None) -> sim.SceneSpec:
    rng = np.random.default_rng([seed, 7])
    return sim.SceneSpec(
        seed=seed,
        layout=layout or str(rng.choice(sim.LAYOUTS)),
        building_density=float(rng.uniform(0.2, 1.0)),
        tree_density=float(rng.uniform(0.2, 1.0)),
        vehicle_count=int(rng.integers(1, 7)),
        pedestrian_count=int(rng.integers(0, 5)),
        weather=weather or str(rng.choice(sim.WEATHERS)),
        location=str(rng.choice(LOCATIONS)),
        environment=str(rng.choice(ENVIRONMENTS)),
    )


def random_velocity(seed: int) -> float:
    return float(np.random.default_rng([seed, 11]).uniform(2.0, 8.0))


def make_sample(seed: int, n_frames: int = 6, render: bool = True, layout: str | None = None,
                weather: str | None = None, velocity: float | None = None) -> Sample:
    spec = random_spec(seed, layout, weather)
    scene = sim.build_scene(spec)
    v = random_velocity(seed) if velocity is None else velocity
    seq, images, prompt = sim.generate_sequence(spec, sim.default_actions(scene, n_frames, v),
                                                n_frames, render=render)
    return Sample(spec, seq, images, prompt)


def make_dataset(seeds, **kw) -> list:
    return [make_sample(int(s), **kw) for s in seeds]
