# Overlap Core Module
