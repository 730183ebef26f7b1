#pragma once

#include <sstream>

#include "evio/grid.hpp"

namespace evio {

struct Event {
  double t = 0.0;  // seconds
  int x = 0, y = 0;
  int p = 1;  // +1 or -1
};

// Time-ordered chunk of the stream covering [t_start, t_end].
struct EventSlice {
  std::vector<Event> events;
  double t_start = 0.0, t_end = 0.0;

  bool time_ordered() const {
    for (std::size_t i = 1; i < events.size(); ++i)
      if (events[i].t < events[i - 1].t) return false;
    return true;
  }
};

// Per-pixel exponentially decayed polarity of the most recent event.
// Raw values lie in [-1, 1]; normalized values in [0, 1].
struct TimeSurface {
  Grid values;
  double t_ref = 0.0;
  double tau = 0.0;
  bool normalized = false;

  int width() const { return values.width; }
  int height() const { return values.height; }
};

// Decay of the most recent event per pixel (single-event form of the decayed
// polarity sum; older events at a pixel are superseded, see normalize()).
inline TimeSurface build_time_surface(const EventSlice& slice, int width, int height,
                                      double tau, double t_ref) {
  require(tau > 0.0, "time surface: tau must be positive");
  require(slice.time_ordered(), "time surface: slice must be time-ordered");
  TimeSurface ts;
  ts.values = Grid(width, height, 0.f);
  ts.t_ref = t_ref;
  ts.tau = tau;
  ts.normalized = false;
  // Events are time-ordered, so the last write at a pixel wins.
  for (const Event& e : slice.events) {
    require(e.x >= 0 && e.x < width && e.y >= 0 && e.y < height,
            "time surface: event outside sensor bounds");
    const double decay = std::exp(-(t_ref - e.t) / tau);
    ts.values.at(e.x, e.y) = float(e.p >= 0 ? decay : -decay);
  }
  return ts;
}

inline TimeSurface build_time_surface(const EventSlice& slice, int width, int height,
                                      double tau) {
  return build_time_surface(slice, width, height, tau, slice.t_end);
}

// Min-max scaling to [0, 1]; a constant surface maps to all zeros.
inline TimeSurface normalize(const TimeSurface& raw) {
  TimeSurface out = raw;
  const float lo = raw.values.min_value();
  const float hi = raw.values.max_value();
  out.normalized = true;
  if (hi - lo <= 0.f) {
    for (auto& v : out.values.values) v = 0.f;
    return out;
  }
  const float inv = 1.f / (hi - lo);
  for (auto& v : out.values.values) v = (v - lo) * inv;
  return out;
}

// ---- stream framing ----

// Fixed-rate framing: slices of 1/rate seconds, aligned to the first event.
inline std::vector<EventSlice> slice_fixed_rate(const std::vector<Event>& events, double rate_hz) {
  require_config(rate_hz > 0.0, "framing rate must be positive");
  std::vector<EventSlice> out;
  if (events.empty()) return out;
  const double dt = 1.0 / rate_hz;
  double t0 = events.front().t;
  EventSlice cur;
  cur.t_start = t0;
  cur.t_end = t0 + dt;
  for (const Event& e : events) {
    while (e.t >= cur.t_end) {
      out.push_back(std::move(cur));
      cur = EventSlice{};
      cur.t_start = out.back().t_end;
      cur.t_end = cur.t_start + dt;
    }
    cur.events.push_back(e);
  }
  out.push_back(std::move(cur));
  return out;
}

// Fixed-count framing: every slice holds exactly `count` events (tail dropped).
inline std::vector<EventSlice> slice_fixed_count(const std::vector<Event>& events,
                                                 std::size_t count) {
  require_config(count >= 1, "fixed-count framing needs count >= 1");
  std::vector<EventSlice> out;
  for (std::size_t i = 0; i + count <= events.size(); i += count) {
    EventSlice s;
    s.events.assign(events.begin() + long(i), events.begin() + long(i + count));
    s.t_start = s.events.front().t;
    s.t_end = s.events.back().t;
    out.push_back(std::move(s));
  }
  return out;
}

// ---- text event file: `t x y p` per line, `#` comments, p in {1,-1} or {1,0} ----

inline std::vector<Event> load_events(const std::string& path, int width = 0, int height = 0) {
  std::ifstream in(path);
  require(bool(in), "cannot open event file: " + path);
  std::vector<Event> events;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    Event e;
    int p;
    if (!(ss >> e.t >> e.x >> e.y >> p))
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed event line");
    e.p = p > 0 ? 1 : -1;  // 0 means negative polarity in common exports
    if (width > 0 && (e.x < 0 || e.x >= width || e.y < 0 || e.y >= height))
      throw DataError(path + ":" + std::to_string(lineno) + ": event outside sensor bounds");
    if (!events.empty() && e.t < events.back().t)
      throw DataError(path + ":" + std::to_string(lineno) + ": timestamps must be non-decreasing");
    events.push_back(e);
  }
  return events;
}

inline void save_events(const std::vector<Event>& events, const std::string& path) {
  std::ofstream out(path);
  require(bool(out), "cannot write event file: " + path);
  out << "# t x y p\n";
  char buf[96];
  for (const Event& e : events) {
    std::snprintf(buf, sizeof(buf), "%.9f %d %d %d\n", e.t, e.x, e.y, e.p);
    out << buf;
  }
}

}  // namespace evio
