#include "checkpoint.hpp"

#include <zlib.h>

#include <fstream>
#include <sstream>

namespace gatedformer {

namespace {

constexpr char kMagic[4] = {'G', 'F', 'C', 'K'};

void put_u16(std::vector<unsigned char>& out, uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const unsigned char* data, size_t size) : data_(data), size_(size) {}

  const unsigned char* take(size_t n) {
    require(pos_ + n <= size_, ErrorCode::ChecksumMismatch, "checkpoint file is truncated");
    const unsigned char* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  uint16_t u16() {
    const unsigned char* p = take(2);
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
  }

  uint32_t u32() {
    const unsigned char* p = take(4);
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
  }

  uint8_t u8() { return *take(1); }

  size_t remaining() const { return size_ - pos_; }

 private:
  const unsigned char* data_;
  size_t size_;
  size_t pos_ = 0;
};

}  // namespace

void write_checkpoint_file(const std::string& path, const RawCheckpoint& ckpt) {
  std::vector<unsigned char> bytes;
  bytes.insert(bytes.end(), kMagic, kMagic + 4);
  put_u32(bytes, ckpt.version);
  put_u32(bytes, static_cast<uint32_t>(ckpt.text.size()));
  bytes.insert(bytes.end(), ckpt.text.begin(), ckpt.text.end());
  put_u32(bytes, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const RawTensorEntry& t : ckpt.tensors) {
    require(t.name.size() <= 0xffff, ErrorCode::InvalidArgument, "tensor name too long");
    put_u16(bytes, static_cast<uint16_t>(t.name.size()));
    bytes.insert(bytes.end(), t.name.begin(), t.name.end());
    bytes.push_back(static_cast<unsigned char>(t.dims.size()));
    for (int64_t d : t.dims) put_u32(bytes, static_cast<uint32_t>(d));
    bytes.insert(bytes.end(), t.payload.begin(), t.payload.end());
  }
  const uint32_t crc =
      static_cast<uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
  put_u32(bytes, crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::IoError, "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::IoError, "write failed for " + path);
}

RawCheckpoint read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoError, "cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string data = buf.str();
  require(data.size() >= 12, ErrorCode::ChecksumMismatch, "checkpoint file is truncated");

  const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
  const uint32_t expected_crc =
      static_cast<uint32_t>(bytes[data.size() - 4]) | (static_cast<uint32_t>(bytes[data.size() - 3]) << 8) |
      (static_cast<uint32_t>(bytes[data.size() - 2]) << 16) |
      (static_cast<uint32_t>(bytes[data.size() - 1]) << 24);
  const uint32_t actual_crc =
      static_cast<uint32_t>(crc32(0L, bytes, static_cast<uInt>(data.size() - 4)));
  require(actual_crc == expected_crc, ErrorCode::ChecksumMismatch,
          "checkpoint CRC mismatch; the file is corrupt or truncated");

  Reader reader(bytes, data.size() - 4);
  const unsigned char* magic = reader.take(4);
  require(std::memcmp(magic, kMagic, 4) == 0, ErrorCode::ChecksumMismatch,
          "not a checkpoint file (bad magic)");
  RawCheckpoint ckpt;
  ckpt.version = reader.u32();
  require(ckpt.version == kCheckpointVersion, ErrorCode::VersionMismatch,
          "checkpoint version " + std::to_string(ckpt.version) + ", expected " +
              std::to_string(kCheckpointVersion));
  const uint32_t text_len = reader.u32();
  const unsigned char* text = reader.take(text_len);
  ckpt.text.assign(reinterpret_cast<const char*>(text), text_len);
  const uint32_t count = reader.u32();
  for (uint32_t i = 0; i < count; ++i) {
    RawTensorEntry entry;
    const uint16_t name_len = reader.u16();
    const unsigned char* name = reader.take(name_len);
    entry.name.assign(reinterpret_cast<const char*>(name), name_len);
    const uint8_t rank = reader.u8();
    int64_t numel = 1;
    for (uint8_t r = 0; r < rank; ++r) {
      entry.dims.push_back(static_cast<int64_t>(reader.u32()));
      numel *= entry.dims.back();
    }
    // Element width = remaining payload share; infer from the text later.
    // Payload length is dims product times width; width is recovered from
    // the precision key by the caller, so store by byte count.
    const size_t width = ckpt.text.find("precision = double") != std::string::npos ? 8 : 4;
    const unsigned char* payload = reader.take(static_cast<size_t>(numel) * width);
    entry.payload.assign(payload, payload + static_cast<size_t>(numel) * width);
    ckpt.tensors.push_back(std::move(entry));
  }
  require(reader.remaining() == 0, ErrorCode::ChecksumMismatch,
          "checkpoint has trailing bytes before the CRC");
  return ckpt;
}

std::string join_checkpoint_text(const std::string& config_text,
                                 const std::map<std::string, std::string>& state) {
  std::string out = config_text;
  out += "[state]\n";
  for (const auto& [k, v] : state) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

CheckpointText split_checkpoint_text(const std::string& text) {
  CheckpointText out;
  const size_t marker = text.find("[state]\n");
  require(marker != std::string::npos, ErrorCode::ChecksumMismatch,
          "checkpoint text has no state section");
  out.config_text = text.substr(0, marker);
  std::stringstream ss(text.substr(marker + 8));
  std::string line;
  while (std::getline(ss, line)) {
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const size_t b = s.find_first_not_of(" \t\r");
      const size_t e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    out.state[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

}  // namespace gatedformer
