"""deltadiff - Differential Testing Harness for Model Conversions and Optimizations"""

__version__ = "1.0.0"
__author__ = "deltadiff developers"
__description__ = "Localizes label divergences between converted, optimized and re-targeted image classifiers"
