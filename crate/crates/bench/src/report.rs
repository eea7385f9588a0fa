//! CSV tables: a config-hash comment, a repetitions comment, a header row
//! and plain comma-separated cells.

use std::io::{self, Write};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub repetitions: usize,
}

impl Table {
    pub fn new(header: &[&str], repetitions: usize) -> Self {
        Self::with_header(header.iter().map(|s| s.to_string()).collect(), repetitions)
    }

    pub fn with_header(header: Vec<String>, repetitions: usize) -> Self {
        Self {
            header,
            rows: Vec::new(),
            repetitions,
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write_csv<W: Write>(&self, mut w: W, config_hash: &str) -> io::Result<()> {
        writeln!(w, "# config-hash: {config_hash}")?;
        writeln!(w, "# repetitions: {}", self.repetitions)?;
        writeln!(w, "{}", self.header.join(","))?;
        for row in &self.rows {
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["a", "b"], 5);
        t.push(vec!["1".into(), "0.5".into()]);
        let mut out = Vec::new();
        t.write_csv(&mut out, "abc").unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "# config-hash: abc\n# repetitions: 5\na,b\n1,0.5\n"
        );
        assert_eq!(t.column("b"), Some(1));
    }
}
