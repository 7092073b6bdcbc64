use std::fmt::Write;

use super::{check_crossover, AvailabilityTimeline, DayCounts};
use crate::sitehost::{DomainClass, Protection};

const MILESTONES: [u32; 5] = [7, 42, 100, 120, 324];

/// Milestone days that fall inside the timeline.
pub fn milestone_days(timeline: &AvailabilityTimeline) -> Vec<u32> {
    let last = timeline.last().day;
    MILESTONES.into_iter().filter(|&d| d <= last).collect()
}

fn push_counts(line: &mut String, c: &DayCounts) {
    write!(line, ",{},{},{},{}", c.available, c.removed, c.changed, c.not_found).unwrap();
}

/// One row per day: totals, then every protection class, then every domain class.
pub fn to_csv(timeline: &AvailabilityTimeline) -> String {
    let mut out = String::from("day,available,removed,changed,not_found");
    let groups = Protection::ALL.iter().map(|p| p.as_str()).chain(DomainClass::ALL.iter().map(|d| d.as_str()));
    for g in groups {
        write!(out, ",{g}_available,{g}_removed,{g}_changed,{g}_not_found").unwrap();
    }
    out.push('\n');
    for row in &timeline.rows {
        let mut line = row.day.to_string();
        push_counts(&mut line, &row.total);
        for c in row.by_protection.iter().chain(row.by_domain.iter()) {
            push_counts(&mut line, c);
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn pct(part: u32, total: u32) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * part as f64 / total as f64
    }
}

pub fn summary(timeline: &AvailabilityTimeline) -> String {
    let mut out = String::new();
    writeln!(out, "replicas: {}  days: {}  seed: {}", timeline.replicas, timeline.last().day, timeline.seed).unwrap();
    writeln!(out).unwrap();
    writeln!(out, "{:>5} {:>10} {:>9} {:>9} {:>10} {:>9}", "day", "available", "removed", "changed", "not_found", "missing").unwrap();
    for day in milestone_days(timeline) {
        let c = &timeline.row(day).expect("milestone row").total;
        let n = c.total();
        writeln!(
            out,
            "{:>5} {:>9.1}% {:>8.1}% {:>8.1}% {:>9.1}% {:>8.1}%",
            day,
            pct(c.available, n),
            pct(c.removed, n),
            pct(c.changed, n),
            pct(c.not_found, n),
            pct(c.missing(), n)
        )
        .unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "missing by protection class:").unwrap();
    for p in Protection::ALL {
        let last = &timeline.last().by_protection[p as usize];
        if last.total() == 0 {
            continue;
        }
        let mut line = format!("  {:<13}", p.as_str());
        for day in milestone_days(timeline) {
            let c = &timeline.row(day).expect("milestone row").by_protection[p as usize];
            write!(line, " d{day}={:.1}%", pct(c.missing(), c.total())).unwrap();
        }
        writeln!(out, "{line}").unwrap();
    }
    match check_crossover(timeline) {
        Some(day) => writeln!(out, "\nanonymous/registration crossover: day {day}").unwrap(),
        None => writeln!(out, "\nanonymous/registration crossover: none").unwrap(),
    }
    out
}
