#include "rudd/codec.hpp"

#include <cstring>

namespace rudd {

namespace {

// little-endian byte writer with section accounting
struct Writer {
  std::vector<uint8_t> bytes;

  void u8(uint8_t v) { bytes.push_back(v); }
  void u16(uint16_t v) {
    bytes.push_back(uint8_t(v));
    bytes.push_back(uint8_t(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(uint8_t(v >> (8 * i)));
  }
  void f32(float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    u32(v);
  }
  void raw(const std::vector<uint8_t>& b) { bytes.insert(bytes.end(), b.begin(), b.end()); }
};

struct Reader {
  const std::vector<uint8_t>& bytes;
  size_t pos = 0;

  explicit Reader(const std::vector<uint8_t>& b) : bytes(b) {}

  void need(size_t n) const {
    if (pos + n > bytes.size()) throw std::runtime_error("bitstream: truncated");
  }
  uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(bytes[pos] | bytes[pos + 1] << 8);
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(bytes[pos + size_t(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() {
    uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::vector<uint8_t> raw(size_t n) {
    need(n);
    std::vector<uint8_t> out(bytes.begin() + long(pos), bytes.begin() + long(pos + n));
    pos += n;
    return out;
  }
};

int decoder_preset_id(const DecoderConfig& c) {
  const auto& names = DecoderConfig::preset_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (c.version == names[i]) return int(i);
  return 255;
}

// Weight payload: symbols k = round(w/q) under a zero-mean Laplace whose
// scale (in symbol units) is the f32-rounded std(w)/sqrt(2) divided by q.
std::vector<uint8_t> encode_weights(const std::vector<double>& snapped, double q, float& scale_out) {
  scale_out = float(weight_population_std(snapped) / std::sqrt(2.0));
  std::vector<int32_t> syms(snapped.size());
  for (size_t i = 0; i < snapped.size(); ++i) syms[i] = quantize_symbol(snapped[i] / q);
  const LaplaceSymbolModel m{0.0, std::max(double(scale_out) / q, kLaplaceScaleMin)};
  return range_encode(syms, [m](size_t) { return m; });
}

std::vector<double> decode_weights(const std::vector<uint8_t>& payload, size_t count, double q,
                                   float scale) {
  const LaplaceSymbolModel m{0.0, std::max(double(scale) / q, kLaplaceScaleMin)};
  auto syms = range_decode(payload, count, [m](size_t) { return m; });
  std::vector<double> out(count);
  for (size_t i = 0; i < count; ++i) out[i] = double(syms[i]) * q;
  return out;
}

// Autoregressive latent payload for one sample. `known` supplies previously
// coded symbols (all of them when encoding, grows when decoding).
LaplaceSymbolModel latent_model(const PyramidLayout& lay, const EntropyNetWeights& net,
                                const std::vector<int32_t>& known, size_t flat_index) {
  // locate scale and in-scale position
  int scale = lay.L - 1;
  for (int l = 0; l < lay.L; ++l)
    if (flat_index < lay.offsets[size_t(l)] + size_t(lay.dims[size_t(l)].first) * size_t(lay.dims[size_t(l)].second)) {
      scale = l;
      break;
    }
  const size_t pos = flat_index - lay.offsets[size_t(scale)];
  const int C = net.config.context_length;
  auto idx = context_indices(lay, scale, pos, C);
  std::vector<double> ctx(size_t(C), 0.0);
  for (int k = 0; k < C; ++k)
    if (idx[size_t(k)] >= 0) ctx[size_t(k)] = double(known[size_t(idx[size_t(k)])]);
  const LaplaceParams p = predict_params(net, ctx);
  return LaplaceSymbolModel{p.mu, p.b};
}

std::vector<uint8_t> encode_latents(const QuantizedPyramid& q, const EntropyNetWeights& net) {
  return range_encode(q.codes, [&](size_t i) { return latent_model(q.layout, net, q.codes, i); });
}

QuantizedPyramid decode_latents(const std::vector<uint8_t>& payload, const PyramidLayout& lay,
                                const EntropyNetWeights& net) {
  QuantizedPyramid q;
  q.layout = lay;
  q.codes.reserve(lay.total);
  RangeDecoder dec(payload.data(), payload.size());
  for (size_t i = 0; i < lay.total; ++i) {
    const LaplaceSymbolModel m = latent_model(lay, net, q.codes, i);
    const int32_t z = m.find(dec.decode_target(m.total()));
    uint64_t cum, freq;
    m.interval(z, cum, freq);
    dec.decode_update(cum, freq);
    q.codes.push_back(z);
  }
  return q;
}

size_t slice_sample_count(size_t slice, size_t N, size_t slice_size) {
  const size_t begin = slice * slice_size;
  return std::min(slice_size, N - begin);
}

}  // namespace

DatasetBitstream encode_dataset(const CodedDataset& ds) {
  const size_t N = ds.latents.size();
  if (ds.labels.size() != N) throw std::invalid_argument("encode_dataset: label/latent count mismatch");
  if (ds.slice_size < 1) throw std::invalid_argument("encode_dataset: slice_size must be >= 1");
  const size_t n_slices = (N + size_t(ds.slice_size) - 1) / size_t(ds.slice_size);
  if (ds.slices.size() != n_slices) throw std::invalid_argument("encode_dataset: slice count mismatch");

  // f32-rounded steps govern the grids on both ends
  const double qe = double(float(ds.q_e));
  const double qd = double(float(ds.q_d));

  Writer w;
  BitAllocation alloc;

  w.bytes.reserve(1024);
  w.raw({'R', 'U', 'D', 'D'});
  w.u16(1);  // format version
  w.u32(uint32_t(ds.K));
  w.u32(uint32_t(N));
  w.u16(uint16_t(ds.H));
  w.u16(uint16_t(ds.W));
  w.u8(uint8_t(ds.L));
  w.u16(uint16_t(ds.ent_cfg.context_length));
  w.u16(uint16_t(ds.ent_cfg.width));
  w.u16(uint16_t(ds.ent_cfg.depth));
  w.u32(uint32_t(ds.slice_size));
  w.u8(uint8_t(decoder_preset_id(ds.dec_cfg)));
  w.u16(uint16_t(ds.dec_cfg.d1));
  w.u16(uint16_t(ds.dec_cfg.d2));
  w.f32(float(ds.q_e));
  w.f32(float(ds.q_d));
  w.u32(uint32_t(n_slices));
  size_t header_bytes = w.bytes.size();

  const PyramidLayout lay = pyramid_dims(ds.H, ds.W, ds.L);

  for (size_t s = 0; s < n_slices; ++s) {
    const auto& sl = ds.slices[s];
    // re-snap to the f32-rounded grid (no-op when already on it)
    auto ent_vals = quantize_weights(sl.ent.flatten(), qe);
    auto dec_vals = quantize_weights(sl.dec.flatten(), qd);

    float scale_e = 0, scale_d = 0;
    auto ent_payload = encode_weights(ent_vals, qe, scale_e);
    auto dec_payload = encode_weights(dec_vals, qd, scale_d);

    w.f32(scale_e);
    w.u32(uint32_t(ent_payload.size()));
    header_bytes += 8;
    w.raw(ent_payload);
    w.f32(scale_d);
    w.u32(uint32_t(dec_payload.size()));
    header_bytes += 8;
    w.raw(dec_payload);
    alloc.implicit_bits += 8 * uint64_t(ent_payload.size() + dec_payload.size());

    EntropyNetWeights coded_net = sl.ent;
    coded_net.unflatten(ent_vals);
    const size_t cnt = slice_sample_count(s, N, size_t(ds.slice_size));
    for (size_t i = 0; i < cnt; ++i) {
      const auto& pyr = ds.latents[s * size_t(ds.slice_size) + i];
      if (pyr.layout.total != lay.total) throw std::invalid_argument("encode_dataset: pyramid layout mismatch");
      auto payload = encode_latents(pyr, coded_net);
      w.u32(uint32_t(payload.size()));
      header_bytes += 4;
      w.raw(payload);
      alloc.explicit_bits += 8 * uint64_t(payload.size());
    }
  }

  // hard labels, fixed-length ceil(log2 K) bits each, MSB-first
  const int lbits = int(label_rate_bits(ds.K).stored_bits_per_label);
  {
    uint8_t acc = 0;
    int nacc = 0;
    size_t label_start = w.bytes.size();
    for (size_t i = 0; i < N; ++i) {
      if (ds.labels[i] < 0 || ds.labels[i] >= ds.K) throw std::invalid_argument("encode_dataset: label out of range");
      for (int bit = lbits - 1; bit >= 0; --bit) {
        acc = uint8_t(acc << 1 | ((ds.labels[i] >> bit) & 1));
        if (++nacc == 8) {
          w.u8(acc);
          acc = 0;
          nacc = 0;
        }
      }
    }
    if (nacc) w.u8(uint8_t(acc << (8 - nacc)));
    alloc.label_bits = 8 * uint64_t(w.bytes.size() - label_start);
  }

  const uint32_t crc = uint32_t(crc32(0, w.bytes.data(), uInt(w.bytes.size())));
  w.u32(crc);
  header_bytes += 4;

  alloc.header_bits = 8 * uint64_t(header_bytes);
  DatasetBitstream out;
  out.bytes = std::move(w.bytes);
  out.allocation = alloc;
  if (out.allocation.total_bits() != 8 * uint64_t(out.bytes.size()))
    throw std::logic_error("encode_dataset: allocation does not sum to stream size");
  return out;
}

namespace {

struct ParsedHeader {
  CodedDataset ds;  // metadata filled, payload containers empty
  size_t N = 0, n_slices = 0;
};

ParsedHeader parse_header(Reader& r) {
  auto magic = r.raw(4);
  if (std::memcmp(magic.data(), "RUDD", 4) != 0) throw std::runtime_error("bitstream: bad magic");
  if (r.u16() != 1) throw std::runtime_error("bitstream: unsupported version");
  ParsedHeader h;
  h.ds.K = int(r.u32());
  h.N = r.u32();
  h.ds.H = r.u16();
  h.ds.W = r.u16();
  h.ds.L = r.u8();
  h.ds.ent_cfg.context_length = r.u16();
  h.ds.ent_cfg.width = r.u16();
  h.ds.ent_cfg.depth = r.u16();
  h.ds.slice_size = int(r.u32());
  const int dec_id = r.u8();
  const int d1 = r.u16(), d2 = r.u16();
  if (dec_id == 255)
    h.ds.dec_cfg = DecoderConfig::custom(h.ds.L, d1, d2);
  else {
    h.ds.dec_cfg = DecoderConfig::preset(DecoderConfig::preset_names().at(size_t(dec_id)), h.ds.L);
  }
  h.ds.dec_cfg.L = h.ds.L;
  h.ds.q_e = double(r.f32());
  h.ds.q_d = double(r.f32());
  h.n_slices = r.u32();
  return h;
}

void check_crc(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 4) throw std::runtime_error("bitstream: truncated");
  const uint32_t want = uint32_t(bytes[bytes.size() - 4]) | uint32_t(bytes[bytes.size() - 3]) << 8 |
                        uint32_t(bytes[bytes.size() - 2]) << 16 | uint32_t(bytes[bytes.size() - 1]) << 24;
  const uint32_t got = uint32_t(crc32(0, bytes.data(), uInt(bytes.size() - 4)));
  if (want != got) throw std::runtime_error("bitstream: CRC mismatch");
}

}  // namespace

CodedDataset decode_dataset(const std::vector<uint8_t>& bytes) {
  check_crc(bytes);
  Reader r(bytes);
  ParsedHeader h = parse_header(r);
  CodedDataset& ds = h.ds;

  const PyramidLayout lay = pyramid_dims(ds.H, ds.W, ds.L);
  Rng dummy(0);
  const EntropyNetWeights ent_proto = EntropyNetWeights::init(ds.ent_cfg, dummy, 0);
  const DecoderWeights dec_proto = DecoderWeights::init(ds.dec_cfg, dummy, 0);

  for (size_t s = 0; s < h.n_slices; ++s) {
    CodedDataset::Slice sl{ent_proto, dec_proto};
    const float scale_e = r.f32();
    auto ent_payload = r.raw(r.u32());
    sl.ent.unflatten(decode_weights(ent_payload, ent_proto.param_count(), ds.q_e, scale_e));
    const float scale_d = r.f32();
    auto dec_payload = r.raw(r.u32());
    sl.dec.unflatten(decode_weights(dec_payload, dec_proto.num_params(), ds.q_d, scale_d));

    const size_t cnt = slice_sample_count(s, h.N, size_t(ds.slice_size));
    for (size_t i = 0; i < cnt; ++i) {
      auto payload = r.raw(r.u32());
      ds.latents.push_back(decode_latents(payload, lay, sl.ent));
    }
    ds.slices.push_back(std::move(sl));
  }

  const int lbits = int(label_rate_bits(ds.K).stored_bits_per_label);
  const size_t label_bytes = (h.N * size_t(lbits) + 7) / 8;
  auto packed = r.raw(label_bytes);
  size_t bitpos = 0;
  for (size_t i = 0; i < h.N; ++i) {
    int v = 0;
    for (int bit = 0; bit < lbits; ++bit, ++bitpos)
      v = v << 1 | ((packed[bitpos / 8] >> (7 - bitpos % 8)) & 1);
    ds.labels.push_back(v);
  }
  return ds;
}

BitAllocation read_allocation(const std::vector<uint8_t>& bytes) {
  check_crc(bytes);
  Reader r(bytes);
  ParsedHeader h = parse_header(r);
  BitAllocation alloc;
  size_t header_bytes = r.pos;
  for (size_t s = 0; s < h.n_slices; ++s) {
    for (int part = 0; part < 2; ++part) {
      r.f32();
      const size_t len = r.u32();
      header_bytes += 8;
      r.need(len);
      r.pos += len;
      alloc.implicit_bits += 8 * uint64_t(len);
    }
    const size_t cnt = slice_sample_count(s, h.N, size_t(h.ds.slice_size));
    for (size_t i = 0; i < cnt; ++i) {
      const size_t len = r.u32();
      header_bytes += 4;
      r.need(len);
      r.pos += len;
      alloc.explicit_bits += 8 * uint64_t(len);
    }
  }
  const int lbits = int(label_rate_bits(h.ds.K).stored_bits_per_label);
  const size_t label_bytes = (h.N * size_t(lbits) + 7) / 8;
  r.need(label_bytes);
  r.pos += label_bytes;
  alloc.label_bits = 8 * uint64_t(label_bytes);
  alloc.header_bits = 8 * uint64_t(header_bytes + 4);  // + trailing CRC
  if (alloc.total_bits() != 8 * uint64_t(bytes.size()))
    throw std::runtime_error("bitstream: sections do not cover the file");
  return alloc;
}

int read_class_count(const std::vector<uint8_t>& bytes) {
  Reader r(bytes);
  return parse_header(r).ds.K;
}

}  // namespace rudd
