"""Gaussian-mixture point-based POMDP planning with variational softmax observations.

Modules: ``gm`` (mixture algebra), ``softmax`` (observation models), ``vb``
(variational softmax products), ``condense`` (mixture reduction), ``pbvi``
(solver), ``filtering`` (belief filter), ``scenarios`` and ``sim``
(target-search experiments) and ``cli`` (command line).
"""

__version__ = "0.1.0"
