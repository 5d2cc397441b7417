"""Utility-indifference pricing under proportional transaction costs.

The package prices European claims through the small-cost expansion of the
exponential-utility investment problem, simulates the associated no-trade
band strategy, solves the quasi-variational HJB inequality on a lattice as
an independent oracle, and re-verifies the analytic sign and pasting
obligations the construction rests on.
"""

from .bsengine import (BsGreeks, CallQuote, bs_call, bs_put, cash_gamma_margin,
                       claim_value, mollified_call_claim, mollified_put_claim)
from .errors import (CheckFailure, ConfigError, DegenerateBandError,
                     NumericError, QuadratureError, ResolutionError,
                     TcbandError, ValidationFailure)
from .expansion import (BandProfile, Expansion, ExpansionBundle, NoTradeBand,
                        PriceResult, ValueResult, band_profile,
                        cost_correction, cost_correction_cash_slope,
                        envelope_value, expansion_value, get_expansion,
                        indifference_price, merton_target, no_trade_band,
                        time_buffer)
from .market import (ClaimSpec, MarketParams, PortfolioPoint, Side,
                     ValidationReport, cash_value, custom_claim,
                     discount_factor, linear_claim, no_claim, terminal_wealth,
                     utility, validate_params)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
