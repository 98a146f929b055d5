# Overlap Tests
