import subprocess
import sys


def install_dependencies():
    print("Setting up the stability toolkit...")

    # Check Python version
    if sys.version_info < (3, 8):
        print("Python 3.8+ is required. Please upgrade.")
        sys.exit(1)

    # Upgrade pip
    subprocess.check_call([sys.executable, "-m", "pip", "install", "--upgrade", "pip"])

    # Install requirements
    try:
        subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
        subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "tests/requirements-test.txt"])
        print("Dependencies installed successfully!")
    except subprocess.CalledProcessError:
        print("Error installing dependencies. Please check your internet connection.")
        sys.exit(1)

    # Matplotlib must render without a display
    try:
        import matplotlib
        matplotlib.use("Agg")
        print("Matplotlib backend check passed.")
    except Exception as e:
        print(f"Warning: matplotlib is not usable: {e}")

    print("\nSetup Complete!")
    print("Next steps:")
    print("1. Optionally put STABILITY_* overrides in .env")
    print("2. Try: python src/main.py lc --preset 0")
    print("3. Run the tests with: pytest tests/ -v -m \"not slow\"")


def main():
    install_dependencies()


if __name__ == "__main__":
    main()
