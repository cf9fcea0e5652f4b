# sdclab Tests
"""
Test module for sdclab.

Contains:
- Unit tests for individual components
- Property-based tests for universal behaviors
- Integration tests running whole protocols on small configurations
"""
