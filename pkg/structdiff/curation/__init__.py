"""
Metadata filtering and annotation cropping rules
"""
