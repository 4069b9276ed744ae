#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rudd/decoder.hpp"
#include "rudd/entropy_model.hpp"
#include "rudd/latents.hpp"

namespace rudd {

// ----------------------------------------------------------- range coder ----
//
// Carry-less range coder, 64-bit state, 16-bit renormalization words,
// cumulative totals up to 2^32. Platform-independent given identical model
// CDFs on both ends.

class RangeEncoder {
 public:
  explicit RangeEncoder(std::vector<uint8_t>& out) : out_(out) {}

  void encode(uint64_t cum, uint64_t freq, uint64_t tot) {
    if (freq == 0 || cum + freq > tot || tot > (1ull << 32))
      throw std::invalid_argument("range_encode: bad interval");
    range_ /= tot;
    low_ += cum * range_;
    range_ *= freq;
    normalize();
  }

  void flush() {
    for (int i = 0; i < 4; ++i) {
      emit_word(uint16_t(low_ >> 48));
      low_ <<= 16;
    }
  }

 private:
  static constexpr uint64_t kTop = 1ull << 48;
  static constexpr uint64_t kBot = 1ull << 32;

  std::vector<uint8_t>& out_;
  uint64_t low_ = 0;
  uint64_t range_ = ~0ull;

  void emit_word(uint16_t w) {
    out_.push_back(uint8_t(w >> 8));
    out_.push_back(uint8_t(w));
  }

  void normalize() {
    while ((low_ ^ (low_ + range_)) < kTop || (range_ < kBot && ((range_ = (0 - low_) & (kBot - 1)), true))) {
      emit_word(uint16_t(low_ >> 48));
      low_ <<= 16;
      range_ <<= 16;
    }
  }
};

class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t size) : data_(data), size_(size) {
    for (int i = 0; i < 4; ++i) code_ = (code_ << 16) | next_word();
  }

  uint64_t decode_target(uint64_t tot) {
    range_ /= tot;
    uint64_t t = (code_ - low_) / range_;
    return t < tot ? t : tot - 1;
  }

  void decode_update(uint64_t cum, uint64_t freq) {
    low_ += cum * range_;
    range_ *= freq;
    while ((low_ ^ (low_ + range_)) < kTop || (range_ < kBot && ((range_ = (0 - low_) & (kBot - 1)), true))) {
      code_ = (code_ << 16) | next_word();
      low_ <<= 16;
      range_ <<= 16;
    }
  }

 private:
  static constexpr uint64_t kTop = 1ull << 48;
  static constexpr uint64_t kBot = 1ull << 32;

  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
  uint64_t low_ = 0, range_ = ~0ull, code_ = 0;

  uint16_t next_word() {
    uint16_t hi = pos_ < size_ ? data_[pos_++] : 0;
    uint16_t lo = pos_ < size_ ? data_[pos_++] : 0;
    return uint16_t(hi << 8 | lo);
  }
};

// ------------------------------------------------- quantized Laplace CDF ----
//
// Strictly monotone integer CDF over the full signed 16-bit symbol range:
// C(z) = (z - zmin) + floor(F(z - 1/2) * (S - A)), S = 2^32, A = 2^16.
// The +1-per-symbol offset guarantees every symbol a nonzero frequency; the
// relative rate overhead is ~A/S per symbol.

struct LaplaceSymbolModel {
  double mu = 0;
  double b = 1;  // in symbol units

  static constexpr int32_t zmin = kSymbolMin;
  static constexpr int32_t zmax = kSymbolMax;
  static constexpr uint64_t kScale = (1ull << 32) - (1ull << 16);

  uint64_t cdf(int64_t z) const {
    if (z <= zmin) return 0;
    if (z > zmax) return uint64_t(z - zmin) + kScale;
    const double f = laplace_cdf(double(z) - 0.5, mu, b);
    uint64_t q = uint64_t(std::floor(std::min(std::max(f, 0.0), 1.0) * double(kScale)));
    if (q > kScale) q = kScale;
    return uint64_t(z - zmin) + q;
  }

  uint64_t total() const { return cdf(int64_t(zmax) + 1); }

  void interval(int32_t z, uint64_t& cum, uint64_t& freq) const {
    cum = cdf(z);
    freq = cdf(int64_t(z) + 1) - cum;
  }

  int32_t find(uint64_t target) const {
    int64_t lo = zmin, hi = zmax;  // invariant: cdf(lo) <= target < cdf(hi+1)
    while (lo < hi) {
      const int64_t mid = lo + (hi - lo + 1) / 2;
      if (cdf(mid) <= target)
        lo = mid;
      else
        hi = mid - 1;
    }
    return int32_t(lo);
  }
};

// -------------------------------------------------- generic symbol coding ----

// prob_fn(i) must yield the model for symbol i using only symbols < i
// (causal), identically at encode and decode time.
inline void range_encode_symbols(RangeEncoder& enc, const std::vector<int32_t>& symbols,
                                 const std::function<LaplaceSymbolModel(size_t)>& model_fn) {
  for (size_t i = 0; i < symbols.size(); ++i) {
    const LaplaceSymbolModel m = model_fn(i);
    uint64_t cum, freq;
    m.interval(symbols[i], cum, freq);
    enc.encode(cum, freq, m.total());
  }
}

inline std::vector<int32_t> range_decode_symbols(RangeDecoder& dec, size_t count,
                                                 const std::function<LaplaceSymbolModel(size_t)>& model_fn) {
  std::vector<int32_t> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    const LaplaceSymbolModel m = model_fn(i);
    const uint64_t tot = m.total();
    const int32_t z = m.find(dec.decode_target(tot));
    uint64_t cum, freq;
    m.interval(z, cum, freq);
    dec.decode_update(cum, freq);
    out.push_back(z);
  }
  return out;
}

// Convenience whole-buffer forms.
inline std::vector<uint8_t> range_encode(const std::vector<int32_t>& symbols,
                                         const std::function<LaplaceSymbolModel(size_t)>& model_fn) {
  std::vector<uint8_t> bytes;
  RangeEncoder enc(bytes);
  range_encode_symbols(enc, symbols, model_fn);
  enc.flush();
  return bytes;
}

inline std::vector<int32_t> range_decode(const std::vector<uint8_t>& bytes, size_t count,
                                         const std::function<LaplaceSymbolModel(size_t)>& model_fn) {
  RangeDecoder dec(bytes.data(), bytes.size());
  return range_decode_symbols(dec, count, model_fn);
}

// --------------------------------------------------------- label rates ----

struct LabelRate {
  double stored_bits_per_label;   // ceil(log2 K), as written to the stream
  double entropy_bound;           // log2 K + 1
};

inline LabelRate label_rate_bits(int K) {
  if (K < 1) throw std::invalid_argument("label_rate_bits: K must be >= 1");
  const double stored = K == 1 ? 0.0 : std::ceil(std::log2(double(K)));
  return {stored, std::log2(double(K)) + 1.0};
}

// Soft-label storage bound: -log2((K-1)!) - (K-1) log2 eps, via log-gamma.
inline double soft_label_rate_bound(int K, double eps) {
  if (K < 2 || eps <= 0 || eps >= 1) throw std::invalid_argument("soft_label_rate_bound: need K >= 2, 0 < eps < 1");
  const double log2_fact = std::lgamma(double(K)) / std::log(2.0);  // log2 (K-1)!
  return -log2_fact - double(K - 1) * std::log2(eps);
}

// ------------------------------------------------------- dataset stream ----

// The encodable Phase-3 snapshot: quantized networks per slice, quantized
// latents and hard labels per sample.
struct CodedDataset {
  int K = 0, H = 0, W = 0, L = 1;
  int slice_size = 1;
  EntropyNetConfig ent_cfg;
  DecoderConfig dec_cfg;
  double q_e = 1e-3, q_d = 1e-3;

  struct Slice {
    EntropyNetWeights ent;  // values already on the q_e grid
    DecoderWeights dec;     // values already on the q_d grid
  };
  std::vector<Slice> slices;
  std::vector<QuantizedPyramid> latents;  // N = K * spc, slice i owns samples
                                          // [i*slice_size, (i+1)*slice_size)
  std::vector<int> labels;                // N ints in [0, K)
};

struct BitAllocation {
  uint64_t explicit_bits = 0;  // latent payloads
  uint64_t implicit_bits = 0;  // entropy-net + decoder weight payloads
  uint64_t label_bits = 0;
  uint64_t header_bits = 0;  // everything else, CRC included

  uint64_t total_bits() const { return explicit_bits + implicit_bits + label_bits + header_bits; }
};

struct DatasetBitstream {
  std::vector<uint8_t> bytes;
  BitAllocation allocation;
};

inline double bpc(uint64_t total_bits, int K) {
  if (K <= 0) throw std::invalid_argument("bpc: K must be positive");
  return double(total_bits) / double(K);
}

inline double bpc(const DatasetBitstream& s, int K) { return bpc(uint64_t(s.bytes.size()) * 8, K); }

DatasetBitstream encode_dataset(const CodedDataset& ds);
CodedDataset decode_dataset(const std::vector<uint8_t>& bytes);
BitAllocation read_allocation(const std::vector<uint8_t>& bytes);  // re-derives section sizes
int read_class_count(const std::vector<uint8_t>& bytes);

}  // namespace rudd
