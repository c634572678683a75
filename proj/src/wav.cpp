#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "beamloc/audio.hpp"
#include "beamloc/binio.hpp"
#include "beamloc/error.hpp"

namespace beamloc {
namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

// KSDATAFORMAT_SUBTYPE_IEEE_FLOAT tail, shared by every WAVE subformat GUID.
constexpr std::array<std::uint8_t, 14> kGuidTail = {0x00, 0x00, 0x00, 0x00, 0x10, 0x00, 0x80,
                                                     0x00, 0x00, 0xAA, 0x00, 0x38, 0x9B, 0x71};

void write_tag(std::ostream& out, const char* tag) { out.write(tag, 4); }

}  // namespace

AudioBuffer AudioBuffer::select(std::span<const std::size_t> channel_indices) const {
  AudioBuffer out(channel_indices.size(), frames, sample_rate);
  for (std::size_t i = 0; i < channel_indices.size(); ++i) {
    if (channel_indices[i] >= channels) throw InputError("channel index out of range");
    auto src = channel(channel_indices[i]);
    std::copy(src.begin(), src.end(), out.channel(i).begin());
  }
  return out;
}

void write_wav(const std::filesystem::path& path, const AudioBuffer& audio, const std::string& comment) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  const bool extensible = audio.channels > 2;
  const std::uint32_t fmt_size = extensible ? 40 : 16;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(audio.channels * audio.frames * 4);
  const std::uint16_t block_align = static_cast<std::uint16_t>(audio.channels * 4);
  const auto rate = static_cast<std::uint32_t>(std::lround(audio.sample_rate));
  // LIST/INFO chunk with a NUL-terminated ICMT comment, padded to even size
  const std::uint32_t text_size = static_cast<std::uint32_t>(comment.size() + 1);
  const std::uint32_t list_size = comment.empty() ? 0 : 4 + 8 + text_size + (text_size & 1);

  write_tag(out, "RIFF");
  binio::write<std::uint32_t>(out, 4 + (8 + fmt_size) + (list_size ? 8 + list_size : 0) + (8 + data_bytes));
  write_tag(out, "WAVE");
  write_tag(out, "fmt ");
  binio::write<std::uint32_t>(out, fmt_size);
  binio::write<std::uint16_t>(out, extensible ? kFormatExtensible : kFormatFloat);
  binio::write<std::uint16_t>(out, static_cast<std::uint16_t>(audio.channels));
  binio::write<std::uint32_t>(out, rate);
  binio::write<std::uint32_t>(out, rate * block_align);
  binio::write<std::uint16_t>(out, block_align);
  binio::write<std::uint16_t>(out, 32);
  if (extensible) {
    binio::write<std::uint16_t>(out, 22);
    binio::write<std::uint16_t>(out, 32);
    binio::write<std::uint32_t>(out, 0);  // no speaker mapping
    binio::write<std::uint16_t>(out, kFormatFloat);
    out.write(reinterpret_cast<const char*>(kGuidTail.data()), kGuidTail.size());
  }
  if (list_size) {
    write_tag(out, "LIST");
    binio::write<std::uint32_t>(out, list_size);
    write_tag(out, "INFO");
    write_tag(out, "ICMT");
    binio::write<std::uint32_t>(out, text_size);
    out.write(comment.c_str(), text_size);
    if (text_size & 1) out.put('\0');
  }
  write_tag(out, "data");
  binio::write<std::uint32_t>(out, data_bytes);
  for (std::size_t n = 0; n < audio.frames; ++n) {
    for (std::size_t c = 0; c < audio.channels; ++c) {
      binio::write<float>(out, static_cast<float>(audio.samples[c * audio.frames + n]));
    }
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

namespace {

struct WavLayout {
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint16_t bits = 0;
  std::uint32_t rate = 0;
  std::uint32_t data_bytes = 0;
  std::string comment;
};

// Walks the RIFF chunks up to the start of the data chunk.
WavLayout read_layout(std::istream& in, const std::filesystem::path& path) {
  if (!in) throw FormatError("cannot open " + path.string());
  char tag[4];
  auto read_tag = [&]() {
    if (!in.read(tag, 4)) throw FormatError(path.string() + ": truncated WAV");
  };
  read_tag();
  if (std::memcmp(tag, "RIFF", 4) != 0) throw FormatError(path.string() + ": not a RIFF file");
  binio::read<std::uint32_t>(in);
  read_tag();
  if (std::memcmp(tag, "WAVE", 4) != 0) throw FormatError(path.string() + ": not a WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::string comment;
  bool have_fmt = false;
  while (true) {
    read_tag();
    const auto size = binio::read<std::uint32_t>(in);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError(path.string() + ": short fmt chunk");
      format = binio::read<std::uint16_t>(in);
      channels = binio::read<std::uint16_t>(in);
      rate = binio::read<std::uint32_t>(in);
      binio::read<std::uint32_t>(in);
      binio::read<std::uint16_t>(in);
      bits = binio::read<std::uint16_t>(in);
      std::uint32_t consumed = 16;
      if (format == kFormatExtensible) {
        if (size < 40) throw FormatError(path.string() + ": short extensible fmt chunk");
        binio::read<std::uint16_t>(in);
        binio::read<std::uint16_t>(in);
        binio::read<std::uint32_t>(in);
        format = binio::read<std::uint16_t>(in);
        in.ignore(14);
        consumed = 40;
      }
      in.ignore(size - consumed + (size & 1));
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw FormatError(path.string() + ": data chunk before fmt chunk");
      if (channels == 0) throw FormatError(path.string() + ": zero channels");
      return {format, channels, bits, rate, size, std::move(comment)};
    } else if (std::memcmp(tag, "LIST", 4) == 0 && size >= 4) {
      read_tag();
      std::uint32_t remaining = size - 4;
      const bool info = std::memcmp(tag, "INFO", 4) == 0;
      while (info && remaining >= 8) {
        read_tag();
        const auto sub = binio::read<std::uint32_t>(in);
        const std::uint32_t padded = sub + (sub & 1);
        if (padded + 8 > remaining) throw FormatError(path.string() + ": malformed LIST chunk");
        if (std::memcmp(tag, "ICMT", 4) == 0) {
          std::string text(sub, '\0');
          if (!in.read(text.data(), sub)) throw FormatError(path.string() + ": truncated WAV");
          text.resize(std::strlen(text.c_str()));
          comment = std::move(text);
          in.ignore(padded - sub);
        } else {
          in.ignore(padded);
        }
        remaining -= padded + 8;
      }
      in.ignore(remaining + (size & 1));
    } else {
      in.ignore(size + (size & 1));
    }
  }
}

}  // namespace

WavInfo wav_info(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const WavLayout l = read_layout(in, path);
  const std::size_t bytes = static_cast<std::size_t>(l.bits / 8) * l.channels;
  return {l.channels, bytes ? l.data_bytes / bytes : 0, static_cast<double>(l.rate), l.comment};
}

AudioBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const auto [format, channels, bits, rate, size, comment] = read_layout(in, path);
  const std::uint32_t bytes_per_sample = bits / 8;
  const bool pcm_ok = format == kFormatPcm && (bits == 16 || bits == 24 || bits == 32);
  const bool float_ok = format == kFormatFloat && (bits == 32 || bits == 64);
  if (!pcm_ok && !float_ok) throw FormatError(path.string() + ": unsupported sample format");

  const std::size_t frames = size / (bytes_per_sample * channels);
  AudioBuffer audio(channels, frames, rate);
  std::vector<unsigned char> raw(frames * channels * bytes_per_sample);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError(path.string() + ": truncated data chunk");
  }
  const unsigned char* p = raw.data();
  for (std::size_t n = 0; n < frames; ++n) {
    for (std::size_t c = 0; c < channels; ++c, p += bytes_per_sample) {
      double v = 0.0;
      if (format == kFormatFloat && bits == 32) {
        float f;
        std::memcpy(&f, p, 4);
        v = f;
      } else if (format == kFormatFloat) {
        std::memcpy(&v, p, 8);
      } else if (bits == 16) {
        v = static_cast<std::int16_t>(p[0] | (p[1] << 8)) / 32768.0;
      } else if (bits == 24) {
        std::int32_t s = p[0] | (p[1] << 8) | (p[2] << 16);
        if (s & 0x800000) s -= 0x1000000;
        v = s / 8388608.0;
      } else {
        std::int32_t s;
        std::memcpy(&s, p, 4);
        v = s / 2147483648.0;
      }
      audio.samples[c * frames + n] = v;
    }
  }
  return audio;
}

}  // namespace beamloc
