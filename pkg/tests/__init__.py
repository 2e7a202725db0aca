"""
Tests for the trustsync pipeline
"""
