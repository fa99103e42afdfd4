#!/usr/bin/env python

"""
cdsl: cross-domain self-supervised pre-training and few-label domain adaptation on desk-scale data
"""


__version__ = "0.1.0"
__author__ = "cdsl developers"
