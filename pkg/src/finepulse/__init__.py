"""finepulse: sub-cycle pulse scheduling and CPMG nuclear-spin spectroscopy.

The package splits into a timing/compilation side (clockdomain, waveform,
sequencer, dacsim) and a physics/analysis side (spinmodel, specfit), tied
together by a batch CLI.
"""

__version__ = "0.1.0"

from .errors import FinepulseError  # noqa: F401
