#include "flexicup/wire.hpp"

#include <array>
#include <cstring>

#include "flexicup/error.hpp"

namespace flexicup::wire {

namespace {

std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k)
      c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    table[i] = c;
  }
  return table;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u64(out, bits);
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& data) : data_(data) {}
  std::uint8_t u8() { return need(1), data_[pos_++]; }
  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
  void bytes(std::uint8_t* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw ProtocolError("payload truncated");
  }
  const std::vector<std::uint8_t>& data_;
  std::size_t pos_ = 0;
};

}  // namespace

bool msg_type_valid(std::uint8_t raw) {
  switch (static_cast<MsgType>(raw)) {
    case MsgType::Frame:
    case MsgType::State:
    case MsgType::CmdLed:
    case MsgType::CmdValve:
    case MsgType::CmdCam:
    case MsgType::CmdMove:
    case MsgType::Ack:
    case MsgType::Err:
      return true;
  }
  return false;
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
  static const auto table = make_crc_table();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i)
    c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

std::vector<std::uint8_t> encode_message(MsgType type, std::uint32_t seq,
                                         const std::vector<std::uint8_t>& payload) {
  if (!msg_type_valid(static_cast<std::uint8_t>(type)))
    throw ProtocolError("invalid message type");
  if (payload.size() > kMaxPayload) throw ProtocolError("payload too large");
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderLen + payload.size() + 4);
  out.push_back(kMagic0);
  out.push_back(kMagic1);
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(type));
  put_u32(out, seq);
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  // CRC covers version through payload.
  const std::uint32_t crc = crc32(out.data() + 2, out.size() - 2);
  put_u32(out, crc);
  return out;
}

void StreamDecoder::feed(const std::uint8_t* data, std::size_t len) {
  buf_.insert(buf_.end(), data, data + len);
}

void StreamDecoder::feed(const std::vector<std::uint8_t>& data) {
  feed(data.data(), data.size());
}

void StreamDecoder::compact() {
  if (start_ > 65536 || start_ == buf_.size()) {
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(start_));
    start_ = 0;
  }
}

std::optional<Message> StreamDecoder::next() {
  for (;;) {
    // Resynchronize on the magic pair.
    while (start_ + 1 < buf_.size() &&
           !(buf_[start_] == kMagic0 && buf_[start_ + 1] == kMagic1))
      ++start_;
    if (buf_.size() - start_ < kHeaderLen) {
      compact();
      return std::nullopt;  // need more data
    }
    const std::uint8_t* h = buf_.data() + start_;
    std::uint32_t payload_len = 0;
    for (int i = 0; i < 4; ++i)
      payload_len |= static_cast<std::uint32_t>(h[8 + i]) << (8 * i);
    const bool header_sane = h[2] == kVersion && msg_type_valid(h[3]) &&
                             payload_len <= kMaxPayload;
    if (!header_sane) {
      ++corrupt_;
      ++start_;  // false sync: slide past this magic
      continue;
    }
    const std::size_t total = kHeaderLen + payload_len + 4;
    if (buf_.size() - start_ < total) {
      compact();
      return std::nullopt;
    }
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
      stored |= static_cast<std::uint32_t>(h[kHeaderLen + payload_len + i]) << (8 * i);
    const std::uint32_t computed = crc32(h + 2, kHeaderLen - 2 + payload_len);
    if (stored != computed) {
      ++corrupt_;
      ++start_;  // corrupt frame: resync past this magic
      continue;
    }
    Message msg;
    msg.type = static_cast<MsgType>(h[3]);
    for (int i = 0; i < 4; ++i)
      msg.seq |= static_cast<std::uint32_t>(h[4 + i]) << (8 * i);
    msg.payload.assign(h + kHeaderLen, h + kHeaderLen + payload_len);
    start_ += total;
    compact();
    return msg;
  }
}

std::array<double, 8> StatePayload::vector() const {
  return {x_cm,
          y_cm,
          z_cm,
          tilt_deg,
          led_on ? 1.0 : 0.0,
          valve_open ? 1.0 : 0.0,
          pressure_kpa,
          attached ? 1.0 : 0.0};
}

std::vector<std::uint8_t> encode_frame_payload(const sensor::Frame& frame) {
  std::vector<std::uint8_t> out;
  out.reserve(22 + frame.pixels.size());
  put_u16(out, static_cast<std::uint16_t>(frame.width_px));
  put_u16(out, static_cast<std::uint16_t>(frame.height_px));
  out.push_back(static_cast<std::uint8_t>(frame.modality));
  put_u16(out, static_cast<std::uint16_t>(frame.zones.center_x_px));
  put_u16(out, static_cast<std::uint16_t>(frame.zones.center_y_px));
  put_u16(out, static_cast<std::uint16_t>(frame.zones.central_radius_px));
  put_u16(out, static_cast<std::uint16_t>(frame.zones.peripheral_outer_px));
  put_u32(out, frame.seq);
  put_u64(out, frame.timestamp_us);
  out.insert(out.end(), frame.pixels.begin(), frame.pixels.end());
  return out;
}

sensor::Frame decode_frame_payload(const std::vector<std::uint8_t>& payload) {
  Reader r(payload);
  sensor::Frame f;
  f.width_px = r.u16();
  f.height_px = r.u16();
  f.modality = static_cast<sensor::Modality>(r.u8());
  f.zones.center_x_px = r.u16();
  f.zones.center_y_px = r.u16();
  f.zones.central_radius_px = r.u16();
  f.zones.peripheral_outer_px = r.u16();
  f.seq = r.u32();
  f.timestamp_us = r.u64();
  const std::size_t count = static_cast<std::size_t>(f.width_px) * f.height_px;
  if (r.remaining() != count) throw ProtocolError("frame pixel count mismatch");
  f.pixels.resize(count);
  r.bytes(f.pixels.data(), count);
  return f;
}

std::vector<std::uint8_t> encode_state_payload(const StatePayload& s) {
  std::vector<std::uint8_t> out;
  out.reserve(74);
  for (double v : s.vector()) put_f64(out, v);
  put_f64(out, s.battery_fraction);
  out.push_back(static_cast<std::uint8_t>(s.mode));
  out.push_back(static_cast<std::uint8_t>(s.config_id));
  return out;
}

StatePayload decode_state_payload(const std::vector<std::uint8_t>& payload) {
  if (payload.size() != 74) throw ProtocolError("state payload must be 74 bytes");
  Reader r(payload);
  StatePayload s;
  s.x_cm = r.f64();
  s.y_cm = r.f64();
  s.z_cm = r.f64();
  s.tilt_deg = r.f64();
  s.led_on = r.f64() != 0.0;
  s.valve_open = r.f64() != 0.0;
  s.pressure_kpa = r.f64();
  s.attached = r.f64() != 0.0;
  s.battery_fraction = r.f64();
  s.mode = static_cast<scene::SuctionMode>(r.u8());
  s.config_id = static_cast<scene::ConfigId>(r.u8());
  return s;
}

std::vector<std::uint8_t> encode_bool_payload(bool value) {
  return {static_cast<std::uint8_t>(value ? 1 : 0)};
}

bool decode_bool_payload(const std::vector<std::uint8_t>& payload) {
  if (payload.size() != 1 || payload[0] > 1)
    throw ProtocolError("flag payload must be a single 0/1 byte");
  return payload[0] == 1;
}

std::vector<std::uint8_t> encode_cam_payload(const CamPayload& cam) {
  std::vector<std::uint8_t> out;
  put_f64(out, cam.exposure_gain);
  put_f64(out, cam.rate_hz);
  out.push_back(cam.downscale);
  return out;
}

CamPayload decode_cam_payload(const std::vector<std::uint8_t>& payload) {
  if (payload.size() != 17) throw ProtocolError("cam payload must be 17 bytes");
  Reader r(payload);
  CamPayload cam;
  cam.exposure_gain = r.f64();
  cam.rate_hz = r.f64();
  cam.downscale = r.u8();
  return cam;
}

std::vector<std::uint8_t> encode_move_payload(const MovePayload& move) {
  std::vector<std::uint8_t> out;
  put_f64(out, move.x_cm);
  put_f64(out, move.y_cm);
  put_f64(out, move.z_cm);
  put_f64(out, move.tilt_deg);
  return out;
}

MovePayload decode_move_payload(const std::vector<std::uint8_t>& payload) {
  if (payload.size() != 32) throw ProtocolError("move payload must be 32 bytes");
  Reader r(payload);
  MovePayload m;
  m.x_cm = r.f64();
  m.y_cm = r.f64();
  m.z_cm = r.f64();
  m.tilt_deg = r.f64();
  return m;
}

std::vector<std::uint8_t> encode_err_payload(ErrCode code, const std::string& detail) {
  std::vector<std::uint8_t> out;
  out.push_back(static_cast<std::uint8_t>(code));
  out.insert(out.end(), detail.begin(), detail.end());
  return out;
}

ErrCode decode_err_code(const std::vector<std::uint8_t>& payload) {
  if (payload.empty()) throw ProtocolError("err payload missing reason code");
  return static_cast<ErrCode>(payload[0]);
}

}  // namespace flexicup::wire
