"""Tests for PDF Joiner."""
