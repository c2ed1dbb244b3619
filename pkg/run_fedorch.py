#!/usr/bin/env python3
"""
Federated learning orchestration engine - Main Entry Point
"""
from src.cli import main

if __name__ == "__main__":
    main()
