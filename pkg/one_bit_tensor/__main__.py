import sys

from one_bit_tensor import main

if __name__ == '__main__':
    sys.exit(main())
