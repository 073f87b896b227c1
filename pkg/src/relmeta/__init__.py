"""Meta-learning for few-shot regression with relation-aware consistency.

Modules: autodiff (reverse-mode tape), nn (extractor + head bank), tasks
(synthetic families and streams), relation (similarity matrix), metalearn
(inner/outer loops), harness (experiments), cli, svgplot.
"""
