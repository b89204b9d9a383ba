//! CSV assembly. Comma-separated, one header row, `.` decimals, no quoting
//! (identifiers are alphanumeric), so byte-identical output is easy to pin
//! in golden tests.

pub struct Csv {
    out: String,
}

impl Csv {
    pub fn new(header: &str) -> Csv {
        let mut out = String::with_capacity(4096);
        out.push_str(header);
        out.push('\n');
        Csv { out }
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for f in fields {
            if !first {
                self.out.push(',');
            }
            self.out.push_str(f.as_ref());
            first = false;
        }
        self.out.push('\n');
    }

    pub fn finish(self) -> String {
        self.out
    }
}

/// Shortest round-trip representation; stable for a given value.
pub fn f(v: f64) -> String {
    format!("{v}")
}

pub fn u(v: u64) -> String {
    format!("{v}")
}

pub fn b(v: bool) -> String {
    if v { "1" } else { "0" }.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_join_with_commas() {
        let mut c = Csv::new("a,b,c");
        c.row(["1", "2", "3"]);
        c.row([f(0.5), u(7), b(true)]);
        assert_eq!(c.finish(), "a,b,c\n1,2,3\n0.5,7,1\n");
    }
}
