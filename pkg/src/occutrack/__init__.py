"""Recurrent occupancy tracking and semantic classification from 2D laser scans."""

__version__ = "0.1.0"
