# Overlap Domain Models
