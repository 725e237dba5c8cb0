"""
gridscope — model-free grid state estimation by low-rank tensor completion
"""

__version__ = "0.1.0"
__author__ = "gridscope developers"
