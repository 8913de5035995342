#pragma once

// Event streams: decoding, fixed-window frame aggregation, rendering and
// timestamp alignment between modalities.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "evmorph/binary_io.hpp"
#include "evmorph/error.hpp"

namespace evmorph {

/// Window length giving 30 frames per second, the frame rate of the RGB videos.
inline constexpr std::uint64_t kDefaultDeltaT = 33000;

enum class Polarity : std::uint8_t { Off = 0, On = 1 };

struct Event {
    std::uint64_t t = 0;  // microseconds
    std::uint16_t x = 0;
    std::uint16_t y = 0;
    Polarity p = Polarity::Off;

    friend bool operator==(const Event&, const Event&) = default;
};

/// Time-ordered events of one sensor. Build through make_event_stream() to get the
/// sorting and bounds guarantees.
struct EventStream {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::vector<Event> events;

    friend bool operator==(const EventStream&, const EventStream&) = default;
};

/// Stable-sorts by timestamp (file order kept for equal t) and checks pixel bounds.
inline EventStream make_event_stream(std::uint32_t width, std::uint32_t height, std::vector<Event> events) {
    for (const auto& e : events) {
        if (e.x >= width || e.y >= height) {
            throw BoundsError("event (" + std::to_string(e.x) + "," + std::to_string(e.y) + ") outside " +
                              std::to_string(width) + "x" + std::to_string(height) + " sensor");
        }
    }
    std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
    return EventStream{width, height, std::move(events)};
}

enum class Cell : std::uint8_t { None = 0, Off = 1, On = 2 };

/// Dense cell grid covering [t_start, t_start + delta_t).
struct EventFrame {
    std::uint64_t t_start = 0;
    std::uint64_t delta_t = kDefaultDeltaT;
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::vector<Cell> cells;  // row-major, height * width

    Cell at(std::uint32_t y, std::uint32_t x) const { return cells[static_cast<std::size_t>(y) * width + x]; }
    Cell& at(std::uint32_t y, std::uint32_t x) { return cells[static_cast<std::size_t>(y) * width + x]; }

    friend bool operator==(const EventFrame&, const EventFrame&) = default;
};

/// Dense height x width x channels grid, interleaved channels (HWC).
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<float> values;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c), values(static_cast<std::size_t>(h) * w * c, fill) {}

    float at(int y, int x, int c = 0) const { return values[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    float& at(int y, int x, int c = 0) { return values[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

    friend bool operator==(const Image&, const Image&) = default;
};

enum class EventFormat { Csv, Evbin };

inline EventFormat event_format_from_path(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".csv") return EventFormat::Csv;
    if (ext == ".evbin") return EventFormat::Evbin;
    throw InvalidArgument("unknown event file extension '" + ext + "' (expected .csv or .evbin)");
}

namespace detail {

template <typename T>
T parse_field(std::string_view field, std::size_t line) {
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) field.remove_suffix(1);
    T value{};
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc{} || ptr != field.data() + field.size()) {
        throw ParseError("cannot parse field '" + std::string(field) + "'", line);
    }
    return value;
}

inline std::vector<std::string_view> split_commas(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(',', start);
        out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline bool is_blank(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r'; });
}

inline EventStream decode_csv(std::istream& in) {
    std::string line;
    std::size_t line_no = 0;
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    bool have_header = false;
    std::vector<Event> events;
    while (std::getline(in, line)) {
        ++line_no;
        if (is_blank(line)) continue;
        const auto fields = split_commas(line);
        if (!have_header) {
            if (fields.size() != 2) throw ParseError("header must be 'width,height'", line_no);
            width = parse_field<std::uint32_t>(fields[0], line_no);
            height = parse_field<std::uint32_t>(fields[1], line_no);
            have_header = true;
            continue;
        }
        if (fields.size() != 4) throw ParseError("event record must be 't,x,y,p'", line_no);
        Event e;
        e.t = parse_field<std::uint64_t>(fields[0], line_no);
        const auto x = parse_field<std::uint32_t>(fields[1], line_no);
        const auto y = parse_field<std::uint32_t>(fields[2], line_no);
        const auto p = parse_field<unsigned>(fields[3], line_no);
        if (p > 1) throw ParseError("polarity must be 0 or 1", line_no);
        if (x >= width || y >= height) {
            throw BoundsError("event at line " + std::to_string(line_no) + " outside sensor bounds");
        }
        e.x = static_cast<std::uint16_t>(x);
        e.y = static_cast<std::uint16_t>(y);
        e.p = static_cast<Polarity>(p);
        events.push_back(e);
    }
    if (!have_header) throw ParseError("missing 'width,height' header", line_no);
    return make_event_stream(width, height, std::move(events));
}

inline EventStream decode_evbin(std::istream& in) {
    io::expect_magic(in, "EVB1");
    const auto width = io::read_le<std::uint32_t>(in, "width");
    const auto height = io::read_le<std::uint32_t>(in, "height");
    const auto count = io::read_le<std::uint64_t>(in, "count");
    std::vector<Event> events;
    events.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, 1u << 24)));
    for (std::uint64_t i = 0; i < count; ++i) {
        Event e;
        e.t = io::read_le<std::uint64_t>(in, "t");
        e.x = io::read_le<std::uint16_t>(in, "x");
        e.y = io::read_le<std::uint16_t>(in, "y");
        const auto offset = static_cast<std::size_t>(in.tellg());
        const auto p = io::read_le<std::uint8_t>(in, "p");
        if (p > 1) throw ParseError("polarity must be 0 or 1", offset);
        e.p = static_cast<Polarity>(p);
        events.push_back(e);
    }
    return make_event_stream(width, height, std::move(events));
}

}  // namespace detail

inline EventStream decode_events(std::istream& in, EventFormat format) {
    return format == EventFormat::Csv ? detail::decode_csv(in) : detail::decode_evbin(in);
}

inline EventStream decode_events(const std::filesystem::path& path, EventFormat format) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidArgument("cannot open event file " + path.string());
    return decode_events(in, format);
}

inline EventStream decode_events(const std::filesystem::path& path) {
    return decode_events(path, event_format_from_path(path));
}

inline void encode_events(const EventStream& stream, std::ostream& out, EventFormat format) {
    if (format == EventFormat::Csv) {
        out << stream.width << ',' << stream.height << '\n';
        for (const auto& e : stream.events) {
            out << e.t << ',' << e.x << ',' << e.y << ',' << static_cast<int>(e.p) << '\n';
        }
        return;
    }
    io::write_magic(out, "EVB1");
    io::write_le<std::uint32_t>(out, stream.width);
    io::write_le<std::uint32_t>(out, stream.height);
    io::write_le<std::uint64_t>(out, stream.events.size());
    for (const auto& e : stream.events) {
        io::write_le<std::uint64_t>(out, e.t);
        io::write_le<std::uint16_t>(out, e.x);
        io::write_le<std::uint16_t>(out, e.y);
        io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.p));
    }
}

inline void encode_events(const EventStream& stream, const std::filesystem::path& path, EventFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write event file " + path.string());
    encode_events(stream, out, format);
}

/// Number of windows needed to cover every event, counting from t = 0.
inline std::size_t frame_count(const EventStream& stream, std::uint64_t delta_t) {
    if (stream.events.empty()) return 0;
    return static_cast<std::size_t>(stream.events.back().t / delta_t + 1);
}

/// Fixed-window aggregation. Frame k covers [k*delta_t, (k+1)*delta_t); a cell takes the
/// polarity of the last event at that pixel inside the window, None if there is none.
/// Windows are independent, so `threads` > 1 splits them across workers without
/// changing the result.
inline std::vector<EventFrame> aggregate_periodic(const EventStream& stream, std::uint64_t delta_t,
                                                  unsigned threads = 1) {
    if (delta_t == 0) throw InvalidArgument("delta_t must be positive");
    const auto& ev = stream.events;
    if (!std::is_sorted(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.t < b.t; })) {
        throw InvalidArgument("event stream is not sorted by timestamp");
    }
    const std::size_t n_frames = frame_count(stream, delta_t);
    std::vector<EventFrame> frames(n_frames);

    auto fill = [&](std::size_t first, std::size_t last) {
        auto it = std::lower_bound(ev.begin(), ev.end(), first * delta_t,
                                   [](const Event& e, std::uint64_t t) { return e.t < t; });
        for (std::size_t k = first; k < last; ++k) {
            EventFrame& f = frames[k];
            f.t_start = k * delta_t;
            f.delta_t = delta_t;
            f.width = stream.width;
            f.height = stream.height;
            f.cells.assign(static_cast<std::size_t>(stream.width) * stream.height, Cell::None);
            const std::uint64_t end = f.t_start + delta_t;
            for (; it != ev.end() && it->t < end; ++it) {
                f.at(it->y, it->x) = it->p == Polarity::On ? Cell::On : Cell::Off;
            }
        }
    };

    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n_frames, 1))));
    if (threads == 1) {
        fill(0, n_frames);
        return frames;
    }
    std::vector<std::thread> workers;
    const std::size_t chunk = (n_frames + threads - 1) / threads;
    for (unsigned w = 0; w < threads; ++w) {
        const std::size_t first = w * chunk;
        const std::size_t last = std::min(n_frames, first + chunk);
        if (first >= last) break;
        workers.emplace_back(fill, first, last);
    }
    for (auto& t : workers) t.join();
    return frames;
}

/// Display convention: ON -> 1.0, OFF -> 0.0, no event -> 0.5.
inline Image render_frame(const EventFrame& frame) {
    Image img(static_cast<int>(frame.height), static_cast<int>(frame.width), 1, 0.5f);
    for (std::size_t i = 0; i < frame.cells.size(); ++i) {
        if (frame.cells[i] == Cell::On) img.values[i] = 1.0f;
        else if (frame.cells[i] == Cell::Off) img.values[i] = 0.0f;
    }
    return img;
}

/// Box-filter resampling: every output pixel averages the input pixels whose
/// centers fall inside its footprint.
inline Image resize_area(const Image& src, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw InvalidArgument("resize target must be positive");
    if (src.height == out_h && src.width == out_w) return src;
    Image dst(out_h, out_w, src.channels);
    std::vector<double> acc(static_cast<std::size_t>(src.channels));
    for (int oy = 0; oy < out_h; ++oy) {
        int y0 = oy * src.height / out_h;
        int y1 = std::max(y0 + 1, (oy + 1) * src.height / out_h);
        for (int ox = 0; ox < out_w; ++ox) {
            int x0 = ox * src.width / out_w;
            int x1 = std::max(x0 + 1, (ox + 1) * src.width / out_w);
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x)
                    for (int c = 0; c < src.channels; ++c) acc[c] += src.at(y, x, c);
            const double n = static_cast<double>((y1 - y0) * (x1 - x0));
            for (int c = 0; c < src.channels; ++c) dst.at(oy, ox, c) = static_cast<float>(acc[c] / n);
        }
    }
    return dst;
}

/// Index of the timestamp closest to `query_t`; ties go to the earlier index.
inline std::size_t nearest_frame_index(std::span<const std::uint64_t> timestamps, std::uint64_t query_t) {
    if (timestamps.empty()) throw InvalidArgument("no frame timestamps to search");
    const auto it = std::lower_bound(timestamps.begin(), timestamps.end(), query_t);
    if (it == timestamps.begin()) return 0;
    if (it == timestamps.end()) return timestamps.size() - 1;
    const auto after = static_cast<std::size_t>(it - timestamps.begin());
    const std::uint64_t d_after = *it - query_t;
    const std::uint64_t d_before = query_t - *(it - 1);
    // `it` is already the earliest index of its value; the predecessor may repeat.
    if (d_before <= d_after) {
        auto first = std::lower_bound(timestamps.begin(), it, *(it - 1));
        return static_cast<std::size_t>(first - timestamps.begin());
    }
    return after;
}

// Rendered frame sequences ("EVFR"): u32 count, u32 height, u32 width, u32 channels,
// u64 delta_t, then count*height*width*channels f32 values.

inline void save_frames(const std::vector<Image>& frames, std::uint64_t delta_t, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write frame file " + path.string());
    io::write_magic(out, "EVFR");
    const Image probe = frames.empty() ? Image(0, 0, 1) : frames.front();
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(frames.size()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(probe.height));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(probe.width));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(probe.channels));
    io::write_le<std::uint64_t>(out, delta_t);
    for (const auto& f : frames) {
        if (f.height != probe.height || f.width != probe.width || f.channels != probe.channels) {
            throw ShapeError("frames in one sequence must share a shape");
        }
        for (float v : f.values) io::write_le<float>(out, v);
    }
}

inline std::vector<Image> load_frames(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidArgument("cannot open frame file " + path.string());
    io::expect_magic(in, "EVFR");
    const auto count = io::read_le<std::uint32_t>(in, "count");
    const auto h = static_cast<int>(io::read_le<std::uint32_t>(in, "height"));
    const auto w = static_cast<int>(io::read_le<std::uint32_t>(in, "width"));
    const auto c = static_cast<int>(io::read_le<std::uint32_t>(in, "channels"));
    (void)io::read_le<std::uint64_t>(in, "delta_t");
    std::vector<Image> frames;
    frames.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Image img(h, w, c);
        for (auto& v : img.values) v = io::read_le<float>(in, "value");
        frames.push_back(std::move(img));
    }
    return frames;
}

}  // namespace evmorph
