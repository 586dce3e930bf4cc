#pragma once

// Scalar type of tensor payloads. The library is built twice: the default
// float32 build used for training and sampling, and a float64 build (with
// LATCHKIT_USE_F64) used by gradient checks, where central differences need
// more than single precision. Each build lives in its own inline namespace so
// both can be linked into one program.

#ifdef LATCHKIT_USE_F64
#define LATCHKIT_PRECISION_NS f64
#else
#define LATCHKIT_PRECISION_NS f32
#endif

#define LATCHKIT_BEGIN_NAMESPACE \
  namespace latchkit {           \
  inline namespace LATCHKIT_PRECISION_NS {
#define LATCHKIT_END_NAMESPACE \
  }                            \
  }

LATCHKIT_BEGIN_NAMESPACE
#ifdef LATCHKIT_USE_F64
using real = double;
#else
using real = float;
#endif
LATCHKIT_END_NAMESPACE
