//! Tables as CSV.

use medas_core::table::{Cell, Table};

pub fn write_table(t: &Table) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&t.columns).expect("in-memory write");
    for row in &t.rows {
        w.write_record(row.iter().map(|c| match c {
            Cell::Int(i) => i.to_string(),
            Cell::Float(f) => f.to_string(),
            Cell::Text(s) => s.clone(),
        }))
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn parse_cell(field: &str) -> Cell {
    if let Ok(i) = field.parse::<i64>() {
        Cell::Int(i)
    } else if let Ok(f) = field.parse::<f64>() {
        Cell::Float(f)
    } else {
        Cell::Text(field.to_string())
    }
}

/// Parses CSV with a header row. Numeric-looking fields become numbers.
pub fn read_table(bytes: &[u8]) -> Result<Table, String> {
    if bytes.is_empty() {
        return Ok(Table::new(Vec::<String>::new()));
    }
    let mut r = csv::Reader::from_reader(bytes);
    let columns: Vec<String> = r.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    let mut table = Table::new(columns);
    for record in r.records() {
        let record = record.map_err(|e| e.to_string())?;
        table.rows.push(record.iter().map(parse_cell).collect());
    }
    Ok(table)
}

/// Loss curve table with header `epoch,loss`, epochs counted from 1.
pub fn loss_table(losses: &[f64]) -> Table {
    let mut t = Table::new(["epoch", "loss"]);
    for (i, l) in losses.iter().enumerate() {
        t.push(vec![Cell::Int(i as i64 + 1), Cell::Float(*l)]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let t = loss_table(&[0.5, 0.25]);
        let bytes = write_table(&t);
        assert_eq!(std::str::from_utf8(&bytes).unwrap(), "epoch,loss\n1,0.5\n2,0.25\n");
        assert_eq!(read_table(&bytes).unwrap(), t);
    }
}
