"""Reference bony shape estimation from labeled skull surfaces.

The modules are deliberately flat: ``surface`` (mesh I/O and labels),
``sampling`` (point-set kernels), ``tensor`` (reverse-mode autodiff and Adam),
``nets`` (simulator and corrector), ``losses``, ``registration``, ``synth``,
``trainer``, ``metrics`` and the ``cli`` driver.
"""

__version__ = "0.1.0"
