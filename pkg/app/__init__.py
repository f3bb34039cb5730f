"""
CV-transition objective articulation measure toolkit
"""

__version__ = "0.1.0"
