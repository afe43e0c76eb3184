# -*- coding: utf-8 -*-

"""Top-level package for hybrid dual-decoder watermark and noise removal."""

__author__ = """Sjoerd Kerkstra"""
__email__ = 'sjoerdk1@xs4all.nl'
__version__ = '0.1.0'
