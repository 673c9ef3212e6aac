// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

#include "amfd/cli.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

int main(int argc, char** argv) {
#if defined(__GLIBC__)
    // Keep the per-step feature buffers on the heap instead of mmap round trips.
    mallopt(M_MMAP_THRESHOLD, 4 << 20);
#endif
    return amfd::cli::run(argc, argv);
}
