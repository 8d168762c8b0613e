"""Which pyramid levels feed which, read straight from the layer manifests.

Run: python demos/02_dense_pyramid_wiring.py
"""
import dataclasses

from deformdet.config import ModelConfig
from deformdet.model import Detector
from deformdet.neck import manifest_graph

for kind in ("pafpn", "dfpn"):
    base = ModelConfig()
    cfg = dataclasses.replace(base, neck=dataclasses.replace(base.neck, kind=kind, levels=(2, 3, 4, 5)))
    model = Detector(cfg, seed=0)
    print(f"--- {kind} neck ({model.param_count()} parameters in the whole model)")
    for line in model.neck_manifest():
        print("  " + line)
    graph = manifest_graph(model.neck_manifest())
    levels = cfg.neck.levels
    print("  direct inputs of each bottom-up node:")
    for i in levels:
        earlier = [f"N{j}" for j in levels if j < i and f"N{j}" in graph[f"N{i}"]]
        print(f"    N{i} <- {', '.join(earlier) or '(none)'}")
    print()
